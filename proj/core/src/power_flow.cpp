#include "gd2rl/power_flow.hpp"

#include <algorithm>
#include <cmath>

namespace gd2rl {

ComplexMatrix build_ybus(const NetworkCase& net, const std::vector<std::size_t>& removed)
{
    const auto n = static_cast<Eigen::Index>(net.buses.size());
    ComplexMatrix y = ComplexMatrix::Zero(n, n);
    const auto& elements = net.elements();
    for (std::size_t e = 0; e < elements.size(); ++e) {
        if (std::find(removed.begin(), removed.end(), e) != removed.end()) continue;
        const auto& el = elements[e];
        const Complex ys = 1.0 / Complex(el.r, el.x);
        const Complex bc(0.0, el.b / 2.0);
        const auto f = static_cast<Eigen::Index>(el.from);
        const auto t = static_cast<Eigen::Index>(el.to);
        y(f, f) += (ys + bc) / (el.tap * el.tap);
        y(t, t) += ys + bc;
        y(f, t) -= ys / el.tap;
        y(t, f) -= ys / el.tap;
    }
    return y;
}

PowerFlowModel::PowerFlowModel(const NetworkCase& net, const OperatingState& state)
    : net_(&net), ybus_(build_ybus(net))
{
    const std::size_t n = net.buses.size();
    if (state.load_p.size() != n || state.load_q.size() != n || state.gen_p.size() != net.generators.size() ||
        state.gen_v.size() != net.generators.size() || state.pv_p.size() != net.pv_units.size())
        throw ValidationError("operating state dimensions do not match the case");

    const double base = net.base_mva;
    p_spec_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    q_spec_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    v_fixed_.assign(n, 1.0);
    std::vector<char> has_v(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        p_spec_[static_cast<Eigen::Index>(i)] = -state.load_p[i] / base;
        q_spec_[static_cast<Eigen::Index>(i)] = -state.load_q[i] / base;
    }
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto b = net.bus_index(net.generators[g].bus);
        p_spec_[static_cast<Eigen::Index>(b)] += state.gen_p[g] / base;
        if (!has_v[b]) {
            v_fixed_[b] = state.gen_v[g];
            has_v[b] = 1;
        }
    }
    for (std::size_t k = 0; k < net.pv_units.size(); ++k) {
        const auto b = net.bus_index(net.pv_units[k].bus);
        p_spec_[static_cast<Eigen::Index>(b)] += state.pv_p[k] / base;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto kind = net.buses[i].kind;
        if (kind != BusKind::Slack) angle_buses_.push_back(i);
        if (kind == BusKind::PQ) pq_buses_.push_back(i);
        if (kind != BusKind::PQ && !has_v[i]) v_fixed_[i] = net.buses[i].v_setpoint;
    }
}

Eigen::VectorXd PowerFlowModel::initial_guess(const PowerFlowSolution* warm) const
{
    Eigen::VectorXd x(unknowns());
    const auto na = static_cast<Eigen::Index>(angle_buses_.size());
    const bool use_warm = warm != nullptr && warm->converged && warm->v_ang.size() == net_->buses.size();
    for (Eigen::Index k = 0; k < na; ++k) x[k] = use_warm ? warm->v_ang[angle_buses_[k]] : 0.0;
    for (std::size_t k = 0; k < pq_buses_.size(); ++k)
        x[na + static_cast<Eigen::Index>(k)] = use_warm ? warm->v_mag[pq_buses_[k]] : 1.0;
    return x;
}

ComplexVector PowerFlowModel::voltages(const Eigen::VectorXd& x) const
{
    const auto n = static_cast<Eigen::Index>(net_->buses.size());
    Eigen::VectorXd ang = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd mag(n);
    for (Eigen::Index i = 0; i < n; ++i) mag[i] = v_fixed_[static_cast<std::size_t>(i)];
    const auto na = static_cast<Eigen::Index>(angle_buses_.size());
    for (Eigen::Index k = 0; k < na; ++k) ang[static_cast<Eigen::Index>(angle_buses_[k])] = x[k];
    for (std::size_t k = 0; k < pq_buses_.size(); ++k)
        mag[static_cast<Eigen::Index>(pq_buses_[k])] = x[na + static_cast<Eigen::Index>(k)];
    ComplexVector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = std::polar(mag[i], ang[i]);
    return v;
}

Eigen::VectorXd PowerFlowModel::mismatch(const Eigen::VectorXd& x) const
{
    const ComplexVector v = voltages(x);
    const ComplexVector s = v.cwiseProduct((ybus_ * v).conjugate());
    Eigen::VectorXd f(unknowns());
    const auto na = static_cast<Eigen::Index>(angle_buses_.size());
    for (Eigen::Index k = 0; k < na; ++k) {
        const auto i = static_cast<Eigen::Index>(angle_buses_[k]);
        f[k] = s[i].real() - p_spec_[i];
    }
    for (std::size_t k = 0; k < pq_buses_.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(pq_buses_[k]);
        f[na + static_cast<Eigen::Index>(k)] = s[i].imag() - q_spec_[i];
    }
    return f;
}

Eigen::MatrixXd PowerFlowModel::jacobian(const Eigen::VectorXd& x) const
{
    const ComplexVector v = voltages(x);
    const ComplexVector current = ybus_ * v;
    const ComplexVector vnorm = v.cwiseQuotient(v.cwiseAbs().cast<Complex>());
    const auto n = v.size();

    // dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
    // dS/d|V|   = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
    ComplexMatrix ds_dang = -(ybus_ * v.asDiagonal()).conjugate();
    ds_dang.diagonal() += current.conjugate();
    ds_dang = (Complex(0.0, 1.0) * v).asDiagonal() * ds_dang;
    ComplexMatrix ds_dmag = v.asDiagonal() * (ybus_ * vnorm.asDiagonal()).conjugate();
    for (Eigen::Index i = 0; i < n; ++i) ds_dmag(i, i) += std::conj(current[i]) * vnorm[i];

    const auto na = static_cast<Eigen::Index>(angle_buses_.size());
    const auto nq = static_cast<Eigen::Index>(pq_buses_.size());
    Eigen::MatrixXd jac(na + nq, na + nq);
    for (Eigen::Index r = 0; r < na + nq; ++r) {
        const bool p_row = r < na;
        const auto bi = static_cast<Eigen::Index>(p_row ? angle_buses_[r] : pq_buses_[r - na]);
        for (Eigen::Index c = 0; c < na; ++c) {
            const Complex d = ds_dang(bi, static_cast<Eigen::Index>(angle_buses_[c]));
            jac(r, c) = p_row ? d.real() : d.imag();
        }
        for (Eigen::Index c = 0; c < nq; ++c) {
            const Complex d = ds_dmag(bi, static_cast<Eigen::Index>(pq_buses_[c]));
            jac(r, na + c) = p_row ? d.real() : d.imag();
        }
    }
    return jac;
}

namespace {

void populate(const NetworkCase& net, const OperatingState& state, const PowerFlowModel& model,
              const Eigen::VectorXd& x, PowerFlowSolution& sol)
{
    const double base = net.base_mva;
    const ComplexVector v = model.voltages(x);
    const ComplexVector s = v.cwiseProduct((model.ybus() * v).conjugate());
    const std::size_t n = net.buses.size();
    sol.v_mag.resize(n);
    sol.v_ang.resize(n);
    sol.p_inj.resize(n);
    sol.q_inj.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        sol.v_mag[i] = std::abs(v[ii]);
        sol.v_ang[i] = std::arg(v[ii]);
        sol.p_inj[i] = s[ii].real() * base;
        sol.q_inj[i] = s[ii].imag() * base;
    }

    // Generator outputs: the bus residual after loads and PV is split evenly
    // among machines sharing a bus; the slack machine takes the P residual.
    std::vector<int> machines_at(n, 0);
    for (const auto& g : net.generators) ++machines_at[net.bus_index(g.bus)];
    std::vector<double> pv_at(n, 0.0);
    for (std::size_t k = 0; k < net.pv_units.size(); ++k) pv_at[net.bus_index(net.pv_units[k].bus)] += state.pv_p[k];
    sol.gen_p.resize(net.generators.size());
    sol.gen_q.resize(net.generators.size());
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto b = net.bus_index(net.generators[g].bus);
        sol.gen_q[g] = (sol.q_inj[b] + state.load_q[b]) / machines_at[b];
        sol.gen_p[g] = state.gen_p[g];
    }
    const auto sg = net.slack_generator();
    const auto sb = net.slack_bus();
    double others = 0.0;
    for (std::size_t g = 0; g < net.generators.size(); ++g)
        if (g != sg && net.bus_index(net.generators[g].bus) == sb) others += state.gen_p[g];
    sol.gen_p[sg] = sol.p_inj[sb] + state.load_p[sb] - pv_at[sb] - others;
    sol.p_slack = sol.gen_p[sg];

    const auto& elements = net.elements();
    sol.branch_pq.resize(elements.size());
    for (std::size_t e = 0; e < elements.size(); ++e) {
        const auto& el = elements[e];
        const Complex ys = 1.0 / Complex(el.r, el.x);
        const Complex bc(0.0, el.b / 2.0);
        const Complex vf = v[static_cast<Eigen::Index>(el.from)];
        const Complex vt = v[static_cast<Eigen::Index>(el.to)];
        const Complex i_from = (ys + bc) / (el.tap * el.tap) * vf - ys / el.tap * vt;
        const Complex i_to = (ys + bc) * vt - ys / el.tap * vf;
        const Complex s_from = vf * std::conj(i_from) * base;
        const Complex s_to = vt * std::conj(i_to) * base;
        sol.branch_pq[e] = {s_from.real(), s_from.imag(), s_to.real(), s_to.imag()};
    }
}

}  // namespace

PowerFlowSolution solve_power_flow(const NetworkCase& net, const OperatingState& state,
                                   const PowerFlowSolution* warm, const PowerFlowOptions& options)
{
    PowerFlowModel model(net, state);
    Eigen::VectorXd x = model.initial_guess(warm);
    PowerFlowSolution sol;
    for (int iter = 0;; ++iter) {
        const Eigen::VectorXd f = model.mismatch(x);
        const double worst = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
        sol.max_mismatch = worst;
        sol.iterations = iter;
        if (!std::isfinite(worst)) break;
        if (worst < options.tolerance) {
            sol.converged = true;
            break;
        }
        if (iter >= options.max_iterations) break;
        const Eigen::MatrixXd jac = model.jacobian(x);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        const Eigen::VectorXd dx = lu.solve(-f);
        if (!dx.allFinite()) break;
        x += dx;
    }
    populate(net, state, model, x, sol);
    if (sol.converged) {
        for (double vm : sol.v_mag)
            if (!(vm > 0.0)) sol.converged = false;
    }
    return sol;
}

double violation_penalty(const PowerFlowSolution& solution, const NetworkCase& net)
{
    const double base = net.base_mva;
    double rp = 0.0;
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto& rec = net.generators[g];
        const double p = solution.gen_p[g];
        if (p < rec.p_min) rp -= (rec.p_min - p) / base;
        if (p > rec.p_max) rp -= (p - rec.p_max) / base;
    }
    double rv = 0.0;
    for (std::size_t i = 0; i < net.buses.size(); ++i) {
        const double v = solution.v_mag[i];
        if (v < net.buses[i].v_min) rv -= net.buses[i].v_min - v;
        if (v > net.buses[i].v_max) rv -= v - net.buses[i].v_max;
    }
    return rp + rv;
}

double pf_value(bool converged, double penalty)
{
    if (!converged) return kPsiMin;
    return std::max(penalty, kPsiMin);
}

double pf_value(const PowerFlowSolution& solution, const NetworkCase& net)
{
    if (!solution.converged) return kPsiMin;
    return pf_value(true, violation_penalty(solution, net));
}

}  // namespace gd2rl
