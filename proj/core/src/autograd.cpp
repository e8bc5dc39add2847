#include "gd2rl/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace gd2rl {

const Matrix& Var::value() const { return tape->value(id); }
const Matrix& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Matrix value)
{
    nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
    return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p)
{
    nodes_.push_back(Node{Matrix(), {}, {}, {}, &p, track_grads_});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::vector<std::size_t> parents, Backward backward)
{
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].needs_grad;
    Node n{std::move(value), {}, std::move(parents), needs ? std::move(backward) : Backward{}, nullptr, needs};
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Matrix& Tape::grad_mut(std::size_t id)
{
    Node& n = nodes_[id];
    const Matrix& v = value(id);
    if (n.grad.rows() != v.rows() || n.grad.cols() != v.cols()) n.grad = Matrix::Zero(v.rows(), v.cols());
    return n.grad;
}

void Tape::backward(Var root)
{
    if (root.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
    const Matrix& rv = value(root.id);
    if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward needs a scalar root, got " + shape_string(rv));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_mut(root.id)(0, 0) = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, i);
        if (n.param) {
            const Matrix& v = n.param->value;
            if (n.param->grad.rows() != v.rows() || n.param->grad.cols() != v.cols())
                n.param->grad = Matrix::Zero(v.rows(), v.cols());
            n.param->grad += n.grad;
        }
    }
}

namespace ag {

namespace {

enum class Broadcast { Same, Row, Scalar };

Broadcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op)
{
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::Same;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
    if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
    throw ShapeError(std::string(op) + ": cannot combine " + shape_string(a) + " with " + shape_string(b));
}

void require_same_tape(Var a, Var b)
{
    if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
}

template <typename Expr>
void accumulate(Tape& t, std::size_t id, const Expr& e)
{
    if (t.needs_grad(id)) t.grad_mut(id) += e;
}

Matrix reduce_to(const Matrix& g, Broadcast kind)
{
    switch (kind) {
    case Broadcast::Same: return g;
    case Broadcast::Row: return g.colwise().sum();
    case Broadcast::Scalar: return Matrix::Constant(1, 1, g.sum());
    }
    return g;
}

Matrix expand(const Matrix& b, Broadcast kind, Eigen::Index rows, Eigen::Index cols)
{
    switch (kind) {
    case Broadcast::Same: return b;
    case Broadcast::Row: return b.replicate(rows, 1);
    case Broadcast::Scalar: return Matrix::Constant(rows, cols, b(0, 0));
    }
    return b;
}

template <typename Forward, typename Derivative>
Var unary(Var a, Forward f, Derivative d)
{
    Matrix out = a.value().unaryExpr(f);
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, d](Tape& t, std::size_t self) {
        const Matrix& x = t.value(ai);
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad(self);
        Matrix dx(x.rows(), x.cols());
        for (Eigen::Index k = 0; k < x.size(); ++k) dx.data()[k] = g.data()[k] * d(x.data()[k], y.data()[k]);
        t.grad_mut(ai) += dx;
    });
}

}  // namespace

Var matmul(Var a, Var b)
{
    require_same_tape(a, b);
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_string(a.value()) + " x " + shape_string(b.value()));
    Matrix out = a.value() * b.value();
    const std::size_t ai = a.id, bi = b.id;
    return a.tape->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(ai)) t.grad_mut(ai).noalias() += g * t.value(bi).transpose();
        if (t.needs_grad(bi)) t.grad_mut(bi).noalias() += t.value(ai).transpose() * g;
    });
}

Var add(Var a, Var b)
{
    require_same_tape(a, b);
    const Broadcast kind = broadcast_kind(a.value(), b.value(), "add");
    Matrix out = a.value() + expand(b.value(), kind, a.rows(), a.cols());
    const std::size_t ai = a.id, bi = b.id;
    return a.tape->record(std::move(out), {ai, bi}, [ai, bi, kind](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        accumulate(t, ai, g);
        if (t.needs_grad(bi)) t.grad_mut(bi) += reduce_to(g, kind);
    });
}

Var sub(Var a, Var b)
{
    require_same_tape(a, b);
    const Broadcast kind = broadcast_kind(a.value(), b.value(), "sub");
    Matrix out = a.value() - expand(b.value(), kind, a.rows(), a.cols());
    const std::size_t ai = a.id, bi = b.id;
    return a.tape->record(std::move(out), {ai, bi}, [ai, bi, kind](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        accumulate(t, ai, g);
        if (t.needs_grad(bi)) t.grad_mut(bi) -= reduce_to(g, kind);
    });
}

Var mul(Var a, Var b)
{
    require_same_tape(a, b);
    const Broadcast kind = broadcast_kind(a.value(), b.value(), "mul");
    Matrix out = a.value().cwiseProduct(expand(b.value(), kind, a.rows(), a.cols()));
    const std::size_t ai = a.id, bi = b.id;
    return a.tape->record(std::move(out), {ai, bi}, [ai, bi, kind](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& av = t.value(ai);
        if (t.needs_grad(ai)) t.grad_mut(ai) += g.cwiseProduct(expand(t.value(bi), kind, av.rows(), av.cols()));
        if (t.needs_grad(bi)) t.grad_mut(bi) += reduce_to(g.cwiseProduct(av), kind);
    });
}

Var scale(Var a, double s)
{
    Matrix out = a.value() * s;
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, s](Tape& t, std::size_t self) { t.grad_mut(ai) += t.grad(self) * s; });
}

Var add_scalar(Var a, double s)
{
    Matrix out = a.value().array() + s;
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) { t.grad_mut(ai) += t.grad(self); });
}

Var linear(Var x, Var w, Var b)
{
    require_same_tape(x, w);
    require_same_tape(x, b);
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
        throw ShapeError("linear: x " + shape_string(x.value()) + ", W " + shape_string(w.value()) + ", b " +
                         shape_string(b.value()));
    Matrix out(x.rows(), w.cols());
    out.noalias() = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    const std::size_t xi = x.id, wi = w.id, bi = b.id;
    return x.tape->record(std::move(out), {xi, wi, bi}, [xi, wi, bi](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(xi)) t.grad_mut(xi).noalias() += g * t.value(wi).transpose();
        if (t.needs_grad(wi)) t.grad_mut(wi).noalias() += t.value(xi).transpose() * g;
        if (t.needs_grad(bi)) t.grad_mut(bi) += g.colwise().sum();
    });
}

Var tanh(Var a)
{
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a)
{
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a)
{
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a)
{
    return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var abs(Var a)
{
    return unary(a, [](double x) { return std::abs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a)
{
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi)
{
    return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return x > lo && x < hi ? 1.0 : 0.0; });
}

Var softmax_rows(Var a)
{
    Matrix out = a.value();
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad(self);
        const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        Matrix dx = g;
        dx.colwise() -= dot;
        t.grad_mut(ai) += dx.cwiseProduct(y);
    });
}

Var log_softmax_rows(Var a)
{
    Matrix out = a.value();
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        const double lse = m + std::log((out.row(r).array() - m).exp().sum());
        out.row(r).array() -= lse;
    }
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad(self);
        const Eigen::VectorXd total = g.rowwise().sum();
        Matrix soft = y.array().exp();
        soft.array().colwise() *= total.array();
        t.grad_mut(ai) += g - soft;
    });
}

Var sum(Var a)
{
    Matrix out = Matrix::Constant(1, 1, a.value().sum());
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
        t.grad_mut(ai).array() += t.grad(self)(0, 0);
    });
}

Var mean(Var a)
{
    const double n = static_cast<double>(a.value().size());
    Matrix out = Matrix::Constant(1, 1, a.value().sum() / n);
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, n](Tape& t, std::size_t self) {
        t.grad_mut(ai).array() += t.grad(self)(0, 0) / n;
    });
}

Var sum_rows(Var a)
{
    Matrix out = a.value().colwise().sum();
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
        t.grad_mut(ai).rowwise() += t.grad(self).row(0);
    });
}

Var sum_cols(Var a)
{
    Matrix out = a.value().rowwise().sum();
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
        t.grad_mut(ai).colwise() += t.grad(self).col(0);
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    std::vector<std::size_t> ids;
    for (const auto& p : parts) {
        require_same_tape(parts.front(), p);
        if (p.rows() != rows)
            throw ShapeError("concat_cols: " + shape_string(parts.front().value()) + " with " + shape_string(p.value()));
        cols += p.cols();
        ids.push_back(p.id);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts.front().tape->record(std::move(out), ids, [ids](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Eigen::Index off = 0;
        for (auto id : ids) {
            const Eigen::Index c = t.value(id).cols();
            if (t.needs_grad(id)) t.grad_mut(id) += g.middleCols(off, c);
            off += c;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts)
{
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    std::vector<std::size_t> ids;
    for (const auto& p : parts) {
        require_same_tape(parts.front(), p);
        if (p.cols() != cols)
            throw ShapeError("concat_rows: " + shape_string(parts.front().value()) + " with " + shape_string(p.value()));
        rows += p.rows();
        ids.push_back(p.id);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return parts.front().tape->record(std::move(out), ids, [ids](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Eigen::Index off = 0;
        for (auto id : ids) {
            const Eigen::Index r = t.value(id).rows();
            if (t.needs_grad(id)) t.grad_mut(id) += g.middleRows(off, r);
            off += r;
        }
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count)
{
    if (start < 0 || count < 0 || start + count > a.cols())
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_string(a.value()));
    Matrix out = a.value().middleCols(start, count);
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, start, count](Tape& t, std::size_t self) {
        t.grad_mut(ai).middleCols(start, count) += t.grad(self);
    });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count)
{
    if (start < 0 || count < 0 || start + count > a.rows())
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_string(a.value()));
    Matrix out = a.value().middleRows(start, count);
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, start, count](Tape& t, std::size_t self) {
        t.grad_mut(ai).middleRows(start, count) += t.grad(self);
    });
}

Var gather_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> index)
{
    const Matrix& av = a.value();
    Matrix out(static_cast<Eigen::Index>(index->size()), av.cols());
    for (std::size_t i = 0; i < index->size(); ++i) {
        const auto src = static_cast<Eigen::Index>((*index)[i]);
        if (src >= av.rows()) throw ShapeError("gather_rows: index " + std::to_string(src) + " into " + shape_string(av));
        out.row(static_cast<Eigen::Index>(i)) = av.row(src);
    }
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, index](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& da = t.grad_mut(ai);
        for (std::size_t i = 0; i < index->size(); ++i)
            da.row(static_cast<Eigen::Index>((*index)[i])) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var scatter_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> index,
                 std::shared_ptr<const std::vector<double>> weight, Eigen::Index rows)
{
    const Matrix& av = a.value();
    if (static_cast<Eigen::Index>(index->size()) != av.rows() || weight->size() != index->size())
        throw ShapeError("scatter_rows: " + std::to_string(index->size()) + " indices for " + shape_string(av));
    Matrix out = Matrix::Zero(rows, av.cols());
    for (std::size_t i = 0; i < index->size(); ++i) {
        const auto dst = static_cast<Eigen::Index>((*index)[i]);
        if (dst >= rows) throw ShapeError("scatter_rows: index " + std::to_string(dst) + " beyond " + std::to_string(rows));
        out.row(dst) += (*weight)[i] * av.row(static_cast<Eigen::Index>(i));
    }
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, index, weight](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& da = t.grad_mut(ai);
        for (std::size_t i = 0; i < index->size(); ++i)
            da.row(static_cast<Eigen::Index>(i)) += (*weight)[i] * g.row(static_cast<Eigen::Index>((*index)[i]));
    });
}

Var segment_mean(Var a, Eigen::Index segment)
{
    const Matrix& av = a.value();
    if (segment <= 0 || av.rows() % segment != 0)
        throw ShapeError("segment_mean: " + shape_string(av) + " in blocks of " + std::to_string(segment));
    const Eigen::Index n = av.rows() / segment;
    Matrix out(n, av.cols());
    for (Eigen::Index s = 0; s < n; ++s)
        out.row(s) = av.middleRows(s * segment, segment).colwise().sum() / static_cast<double>(segment);
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, segment, n](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& da = t.grad_mut(ai);
        for (Eigen::Index s = 0; s < n; ++s)
            da.middleRows(s * segment, segment).rowwise() += g.row(s) / static_cast<double>(segment);
    });
}

Var segment_std(Var a, Eigen::Index segment, double eps)
{
    const Matrix& av = a.value();
    if (segment <= 0 || av.rows() % segment != 0)
        throw ShapeError("segment_std: " + shape_string(av) + " in blocks of " + std::to_string(segment));
    const Eigen::Index n = av.rows() / segment;
    const double len = static_cast<double>(segment);
    Matrix out(n, av.cols());
    Matrix mu(n, av.cols());
    for (Eigen::Index s = 0; s < n; ++s) {
        const auto block = av.middleRows(s * segment, segment);
        mu.row(s) = block.colwise().sum() / len;
        const Matrix centered = block.rowwise() - mu.row(s);
        out.row(s) = (centered.array().square().colwise().sum() / len + eps).sqrt();
    }
    const std::size_t ai = a.id;
    return a.tape->record(std::move(out), {ai}, [ai, segment, n, len, mu](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& sd = t.value(self);
        const Matrix& x = t.value(ai);
        Matrix& da = t.grad_mut(ai);
        for (Eigen::Index s = 0; s < n; ++s) {
            const Eigen::RowVectorXd coef = g.row(s).cwiseQuotient(sd.row(s)) / len;
            for (Eigen::Index r = 0; r < segment; ++r)
                da.row(s * segment + r) += (x.row(s * segment + r) - mu.row(s)).cwiseProduct(coef);
        }
    });
}

Var conv1d(Var x, Var w, Var b, Eigen::Index kernel, Eigen::Index segment)
{
    require_same_tape(x, w);
    require_same_tape(x, b);
    const Matrix& xv = x.value();
    const Eigen::Index c_in = xv.cols();
    if (kernel <= 0 || segment < kernel || xv.rows() % segment != 0 || w.rows() != kernel * c_in ||
        b.rows() != 1 || b.cols() != w.cols())
        throw ShapeError("conv1d: x " + shape_string(xv) + ", W " + shape_string(w.value()) + ", kernel " +
                         std::to_string(kernel) + ", segment " + std::to_string(segment));
    const Eigen::Index n_seg = xv.rows() / segment;
    const Eigen::Index out_len = segment - kernel + 1;
    Matrix cols(n_seg * out_len, kernel * c_in);
    for (Eigen::Index s = 0; s < n_seg; ++s)
        for (Eigen::Index p = 0; p < out_len; ++p)
            for (Eigen::Index k = 0; k < kernel; ++k)
                cols.block(s * out_len + p, k * c_in, 1, c_in) = xv.row(s * segment + p + k);
    Matrix out(cols.rows(), w.cols());
    out.noalias() = cols * w.value();
    out.rowwise() += b.value().row(0);
    const std::size_t xi = x.id, wi = w.id, bi = b.id;
    return x.tape->record(
        std::move(out), {xi, wi, bi},
        [xi, wi, bi, kernel, segment, n_seg, out_len, c_in, cols](Tape& t, std::size_t self) {
            const Matrix& g = t.grad(self);
            if (t.needs_grad(wi)) t.grad_mut(wi).noalias() += cols.transpose() * g;
            if (t.needs_grad(bi)) t.grad_mut(bi) += g.colwise().sum();
            if (t.needs_grad(xi)) {
                const Matrix dcols = g * t.value(wi).transpose();
                Matrix& dx = t.grad_mut(xi);
                for (Eigen::Index s = 0; s < n_seg; ++s)
                    for (Eigen::Index p = 0; p < out_len; ++p)
                        for (Eigen::Index k = 0; k < kernel; ++k)
                            dx.row(s * segment + p + k) += dcols.block(s * out_len + p, k * c_in, 1, c_in);
            }
        });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

}  // namespace ag

}  // namespace gd2rl
