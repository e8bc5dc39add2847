#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gd2rl/grid.hpp"
#include "gd2rl/tensor.hpp"

namespace gd2rl {

/// Named trainable array with its gradient slot and Adam moments.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
};

class ParameterSet {
public:
    ParameterSet() = default;
    ParameterSet(const ParameterSet& other);
    ParameterSet& operator=(const ParameterSet& other);
    ParameterSet(ParameterSet&&) noexcept = default;
    ParameterSet& operator=(ParameterSet&&) noexcept = default;

    /// Zero-initialized parameter; names must be unique.
    Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    /// Uniform(-sqrt(6/(fan_in+fan_out)), +...) weight and zero bias of a dense layer.
    Parameter& add_glorot(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng);

    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    Parameter& operator[](std::size_t i) { return *params_[i]; }
    const Parameter& operator[](std::size_t i) const { return *params_[i]; }

    void zero_grad();
    /// Copies values from a set with the same names and shapes.
    void copy_values_from(const ParameterSet& other);
    /// this <- eps * online + (1 - eps) * this.
    void soft_update_from(const ParameterSet& online, double eps);

    std::uint64_t adam_steps = 0;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter of the set.
void adam_step(ParameterSet& params, const AdamConfig& config);

/// Named arrays in a versioned little-endian binary file.
using NamedArrays = std::vector<std::pair<std::string, Matrix>>;
void save_arrays(const std::string& path, const NamedArrays& arrays);
NamedArrays load_arrays(const std::string& path);
const Matrix& find_array(const NamedArrays& arrays, const std::string& name);

/// Parameter values (and, with `optimizer`, Adam moments and step count)
/// under `prefix`.
void export_parameters(const ParameterSet& params, const std::string& prefix, NamedArrays& out, bool optimizer = false);
void import_parameters(ParameterSet& params, const std::string& prefix, const NamedArrays& in, bool optimizer = false);

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    const Matrix& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse
/// order is a valid topological order.
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    /// With `track_grads` false nothing is recorded for backward (inference).
    explicit Tape(bool track_grads = true) : track_grads_(track_grads) {}

    Var constant(Matrix value);
    Var parameter(Parameter& p);
    /// Records an op result. `backward` reads the node's grad and adds into
    /// its parents' grads; it is only called when some parent needs a grad.
    Var record(Matrix value, std::vector<std::size_t> parents, Backward backward);

    /// Seeds d(root)/d(root) = 1 (root must be 1 x 1), propagates, and adds
    /// the leaf grads into their Parameter::grad.
    void backward(Var root);

    /// Parameter nodes alias Parameter::value, which must outlive the tape.
    const Matrix& value(std::size_t id) const { return nodes_[id].param ? nodes_[id].param->value : nodes_[id].value; }
    const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
    Matrix& grad_mut(std::size_t id);
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<std::size_t> parents;
        Backward backward;
        Parameter* param = nullptr;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
    bool track_grads_ = true;
};

namespace ag {

Var matmul(Var a, Var b);
/// a + b with b of the same shape, a 1 x cols row (broadcast down) or 1 x 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product, same broadcasting as add.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// x W + b.
Var linear(Var x, Var w, Var b);

Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var square(Var a);
/// Gradient passes only where the input lies strictly inside [lo, hi].
Var clamp(Var a, double lo, double hi);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);

Var sum(Var a);
Var mean(Var a);
/// Column sums as a 1 x cols row.
Var sum_rows(Var a);
/// Row sums as a rows x 1 column.
Var sum_cols(Var a);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);

/// out[i] = a[index[i]].
Var gather_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> index);
/// out[index[i]] += weight[i] * a[i], out has `rows` rows.
Var scatter_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> index,
                 std::shared_ptr<const std::vector<double>> weight, Eigen::Index rows);

/// Mean and population std over consecutive blocks of `segment` rows.
Var segment_mean(Var a, Eigen::Index segment);
Var segment_std(Var a, Eigen::Index segment, double eps = 1e-6);

/// Valid-mode 1-D convolution along the row axis. x: length x c_in,
/// w: (kernel * c_in) x c_out, b: 1 x c_out. Rows are positions, columns are
/// channels; sequences of `segment` rows are convolved independently.
Var conv1d(Var x, Var w, Var b, Eigen::Index kernel, Eigen::Index segment);

/// Returns a constant copy (no gradient flows back).
Var detach(Var a);

}  // namespace ag

}  // namespace gd2rl
