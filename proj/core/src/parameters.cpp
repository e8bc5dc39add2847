#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gd2rl/autograd.hpp"

namespace gd2rl {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

ParameterSet::ParameterSet(const ParameterSet& other) : adam_steps(other.adam_steps), index_(other.index_)
{
    for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other)
{
    if (this != &other) {
        ParameterSet copy(other);
        *this = std::move(copy);
    }
    return *this;
}

Parameter& ParameterSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols)
{
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = Matrix::Zero(rows, cols);
    p->grad = Matrix::Zero(rows, cols);
    p->adam_m = Matrix::Zero(rows, cols);
    p->adam_v = Matrix::Zero(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter& ParameterSet::add_glorot(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    Parameter& p = add(name, rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = u(rng);
    return p;
}

Parameter& ParameterSet::at(const std::string& name)
{
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return *params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const
{
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return *params_[it->second];
}

std::size_t ParameterSet::scalar_count() const
{
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
}

void ParameterSet::zero_grad()
{
    for (auto& p : params_) p->grad.setZero();
}

void ParameterSet::copy_values_from(const ParameterSet& other)
{
    for (auto& p : params_) {
        const Parameter& src = other.at(p->name);
        if (src.value.rows() != p->value.rows() || src.value.cols() != p->value.cols())
            throw ShapeError("copy_values_from: '" + p->name + "' " + shape_string(p->value) + " vs " +
                             shape_string(src.value));
        p->value = src.value;
    }
}

void ParameterSet::soft_update_from(const ParameterSet& online, double eps)
{
    for (auto& p : params_) {
        const Parameter& src = online.at(p->name);
        if (eps == 1.0)
            p->value = src.value;
        else
            p->value = eps * src.value + (1.0 - eps) * p->value;
    }
}

void adam_step(ParameterSet& params, const AdamConfig& c)
{
    ++params.adam_steps;
    const double t = static_cast<double>(params.adam_steps);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        p.adam_m = c.beta1 * p.adam_m + (1.0 - c.beta1) * p.grad;
        p.adam_v = c.beta2 * p.adam_v + (1.0 - c.beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= c.lr * (p.adam_m.array() / bc1) / ((p.adam_v.array() / bc2).sqrt() + c.eps);
    }
}

namespace {

constexpr char kMagic[8] = {'G', 'D', '2', 'R', 'L', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::ifstream& in, const std::string& path)
{
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError(path + ": truncated checkpoint");
    return v;
}

}  // namespace

void save_arrays(const std::string& path, const NamedArrays& arrays)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, m] : arrays) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, 2);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write error on " + path);
}

NamedArrays load_arrays(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint " + path);
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw ParseError(path + ": not a checkpoint file");
    const auto version = take<std::uint32_t>(in, path);
    if (version != kVersion) throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
    const auto count = take<std::uint32_t>(in, path);
    NamedArrays arrays;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = take<std::uint32_t>(in, path);
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw ParseError(path + ": truncated checkpoint");
        const auto ndim = take<std::uint32_t>(in, path);
        if (ndim != 2) throw ParseError(path + ": array '" + name + "' has " + std::to_string(ndim) + " dimensions");
        const auto rows = take<std::uint64_t>(in, path);
        const auto cols = take<std::uint64_t>(in, path);
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
            throw ParseError(path + ": truncated checkpoint");
        arrays.emplace_back(std::move(name), std::move(m));
    }
    return arrays;
}

const Matrix& find_array(const NamedArrays& arrays, const std::string& name)
{
    for (const auto& [n, m] : arrays)
        if (n == name) return m;
    throw ParseError("checkpoint has no array '" + name + "'");
}

void export_parameters(const ParameterSet& params, const std::string& prefix, NamedArrays& out, bool optimizer)
{
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        out.emplace_back(prefix + p.name, p.value);
        if (optimizer) {
            out.emplace_back(prefix + "adam_m/" + p.name, p.adam_m);
            out.emplace_back(prefix + "adam_v/" + p.name, p.adam_v);
        }
    }
    if (optimizer) out.emplace_back(prefix + "adam_steps", Matrix::Constant(1, 1, static_cast<double>(params.adam_steps)));
}

void import_parameters(ParameterSet& params, const std::string& prefix, const NamedArrays& in, bool optimizer)
{
    auto load = [&](const std::string& name, Matrix& dst) {
        const Matrix& src = find_array(in, name);
        if (src.rows() != dst.rows() || src.cols() != dst.cols())
            throw ParseError("checkpoint array '" + name + "' is " + shape_string(src) + ", model expects " +
                             shape_string(dst));
        dst = src;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        load(prefix + p.name, p.value);
        if (optimizer) {
            load(prefix + "adam_m/" + p.name, p.adam_m);
            load(prefix + "adam_v/" + p.name, p.adam_v);
        }
    }
    if (optimizer) params.adam_steps = static_cast<std::uint64_t>(find_array(in, prefix + "adam_steps")(0, 0));
}

}  // namespace gd2rl
