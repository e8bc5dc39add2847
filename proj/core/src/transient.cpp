#include "gd2rl/transient.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gd2rl {

std::size_t SimConfig::points() const { return static_cast<std::size_t>(std::llround(t_end / dt_out)); }

void SimConfig::validate() const
{
    if (!(h_step > 0.0) || !(dt_out > 0.0) || !(t_end > 0.0)) throw std::invalid_argument("SimConfig: non-positive time");
    const double ratio = dt_out / h_step;
    if (std::abs(ratio - std::round(ratio)) > 1e-9)
        throw std::invalid_argument("SimConfig: h_step must divide the output interval");
}

namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

/// Admittances of the network with each machine's internal node appended.
struct AugmentedNetwork {
    ComplexMatrix ybb;  // bus block incl. loads, machine ties, fault node
    std::vector<std::size_t> gen_bus;
    std::vector<Complex> gen_tie;
};

AugmentedNetwork augment(const NetworkCase& net, const PowerFlowSolution& solution, NetworkStage stage,
                         const Contingency& contingency, double fault_impedance)
{
    std::vector<std::size_t> removed;
    const bool disturbed = !contingency.is_none() && stage != NetworkStage::Prefault;
    std::size_t faulted = 0;
    if (disturbed) {
        faulted = net.line_element(contingency.branch_id);
        removed.push_back(faulted);
        if (stage == NetworkStage::Postfault && !net.connected_without(faulted))
            throw SingularReductionError("removing branch " + std::to_string(contingency.branch_id) +
                                         " islands the network");
    }
    const ComplexMatrix ybus = build_ybus(net, removed);
    const auto n = ybus.rows();
    const bool split = disturbed && stage == NetworkStage::Fault;
    AugmentedNetwork aug;
    aug.ybb = ComplexMatrix::Zero(n + (split ? 1 : 0), n + (split ? 1 : 0));
    aug.ybb.topLeftCorner(n, n) = ybus;

    // Constant-admittance loads from the solved net consumption (PV included
    // as negative load).
    std::vector<double> p_gen(static_cast<std::size_t>(n), 0.0), q_gen(static_cast<std::size_t>(n), 0.0);
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto b = net.bus_index(net.generators[g].bus);
        p_gen[b] += solution.gen_p[g];
        q_gen[b] += solution.gen_q[g];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const double p_load = (p_gen[iu] - solution.p_inj[iu]) / net.base_mva;
        const double q_load = (q_gen[iu] - solution.q_inj[iu]) / net.base_mva;
        const double v2 = solution.v_mag[iu] * solution.v_mag[iu];
        aug.ybb(i, i) += Complex(p_load, -q_load) / v2;
    }

    for (const auto& g : net.generators) {
        const auto b = net.bus_index(g.bus);
        const Complex tie = 1.0 / Complex(0.0, g.xdp);
        aug.gen_bus.push_back(b);
        aug.gen_tie.push_back(tie);
        aug.ybb(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(b)) += tie;
    }

    if (split) {
        const auto& el = net.elements()[faulted];
        const auto f = static_cast<Eigen::Index>(el.from);
        const auto t = static_cast<Eigen::Index>(el.to);
        const Eigen::Index mid = n;
        const double a = contingency.location;
        auto add_section = [&](Eigen::Index i, Eigen::Index j, double frac) {
            const Complex ys = 1.0 / Complex(el.r * frac, el.x * frac);
            const Complex bc(0.0, el.b * frac / 2.0);
            aug.ybb(i, i) += ys + bc;
            aug.ybb(j, j) += ys + bc;
            aug.ybb(i, j) -= ys;
            aug.ybb(j, i) -= ys;
        };
        add_section(f, mid, a);
        add_section(mid, t, 1.0 - a);
        aug.ybb(mid, mid) += 1.0 / Complex(fault_impedance, 0.0);
    }
    return aug;
}

}  // namespace

ComplexMatrix kron_reduce(const NetworkCase& net, const PowerFlowSolution& solution, NetworkStage stage,
                          const Contingency& contingency, double fault_impedance)
{
    if (!solution.converged) throw std::invalid_argument("kron_reduce needs a converged power flow");
    const AugmentedNetwork aug = augment(net, solution, stage, contingency, fault_impedance);
    const auto ng = static_cast<Eigen::Index>(aug.gen_bus.size());
    const auto nb = aug.ybb.rows();

    ComplexMatrix ybg = ComplexMatrix::Zero(nb, ng);
    for (Eigen::Index g = 0; g < ng; ++g)
        ybg(static_cast<Eigen::Index>(aug.gen_bus[static_cast<std::size_t>(g)]), g) = -aug.gen_tie[static_cast<std::size_t>(g)];

    Eigen::PartialPivLU<ComplexMatrix> lu(aug.ybb);
    const auto& packed = lu.matrixLU();
    double largest = 0.0;
    double smallest = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < nb; ++i) {
        largest = std::max(largest, std::abs(packed(i, i)));
        smallest = std::min(smallest, std::abs(packed(i, i)));
    }
    if (!(smallest > 1e-13 * largest)) throw SingularReductionError("reduction pivot underflow");

    const ComplexMatrix x = lu.solve(ybg);
    ComplexMatrix reduced = -ybg.transpose() * x;
    for (Eigen::Index g = 0; g < ng; ++g) reduced(g, g) += aug.gen_tie[static_cast<std::size_t>(g)];
    return reduced;
}

ComplexVector internal_emfs(const NetworkCase& net, const PowerFlowSolution& solution)
{
    ComplexVector e(static_cast<Eigen::Index>(net.generators.size()));
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto b = net.bus_index(net.generators[g].bus);
        const Complex vt = std::polar(solution.v_mag[b], solution.v_ang[b]);
        const Complex s(solution.gen_p[g] / net.base_mva, solution.gen_q[g] / net.base_mva);
        const Complex current = std::conj(s / vt);
        e[static_cast<Eigen::Index>(g)] = vt + Complex(0.0, net.generators[g].xdp) * current;
    }
    return e;
}

SwingSystem build_swing_system(const NetworkCase& net, const PowerFlowSolution& solution,
                               const Contingency& contingency, const SimConfig& config)
{
    SwingSystem sys;
    const ComplexVector e = internal_emfs(net, solution);
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        sys.h.push_back(net.generators[g].h);
        sys.d.push_back(net.generators[g].d);
        sys.p_mech.push_back(solution.gen_p[g] / net.base_mva);
        sys.emf.push_back(std::abs(e[static_cast<Eigen::Index>(g)]));
        sys.delta0.push_back(std::arg(e[static_cast<Eigen::Index>(g)]));
    }
    sys.y_prefault = kron_reduce(net, solution, NetworkStage::Prefault, contingency, config.fault_impedance);
    if (contingency.is_none()) {
        sys.y_fault = sys.y_prefault;
        sys.y_postfault = sys.y_prefault;
        sys.faulted = false;
        sys.t_clear = 0.0;
    } else {
        sys.y_fault = kron_reduce(net, solution, NetworkStage::Fault, contingency, config.fault_impedance);
        sys.y_postfault = kron_reduce(net, solution, NetworkStage::Postfault, contingency, config.fault_impedance);
        sys.faulted = true;
        sys.t_clear = contingency.t_clear;
    }
    return sys;
}

std::vector<double> electrical_power(const ComplexMatrix& y, const std::vector<double>& emf,
                                     const std::vector<double>& delta)
{
    const std::size_t n = emf.size();
    std::vector<double> pe(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const Complex yij = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const double dij = delta[i] - delta[j];
            acc += emf[j] * (yij.real() * std::cos(dij) + yij.imag() * std::sin(dij));
        }
        pe[i] = emf[i] * acc;
    }
    return pe;
}

namespace {

/// Right-hand side with the network coupling factored as
/// Pe_i = c_i (C c - D s)_i + s_i (C s + D c)_i.
class SwingRhs {
public:
    SwingRhs(const SwingSystem& sys, double omega_s) : sys_(sys), omega_s_(omega_s), n_(sys.size())
    {
        cos_.resize(n_);
        sin_.resize(n_);
    }

    void set_network(const ComplexMatrix& y)
    {
        g_.resize(n_ * n_);
        b_.resize(n_ * n_);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j) {
                const Complex yij = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                const double ee = sys_.emf[i] * sys_.emf[j];
                g_[i * n_ + j] = ee * yij.real();
                b_[i * n_ + j] = ee * yij.imag();
            }
    }

    // state layout: [delta (rad) ; speed deviation (pu)]
    void operator()(const std::vector<double>& x, std::vector<double>& dx)
    {
        for (std::size_t i = 0; i < n_; ++i) {
            cos_[i] = std::cos(x[i]);
            sin_[i] = std::sin(x[i]);
        }
        for (std::size_t i = 0; i < n_; ++i) {
            double a = 0.0, b = 0.0;
            const double* gi = &g_[i * n_];
            const double* bi = &b_[i * n_];
            for (std::size_t j = 0; j < n_; ++j) {
                a += gi[j] * cos_[j] - bi[j] * sin_[j];
                b += gi[j] * sin_[j] + bi[j] * cos_[j];
            }
            const double pe = cos_[i] * a + sin_[i] * b;
            const double w = x[n_ + i];
            dx[i] = omega_s_ * w;
            dx[n_ + i] = (sys_.p_mech[i] - pe - sys_.d[i] * w) / (2.0 * sys_.h[i]);
        }
    }

private:
    const SwingSystem& sys_;
    double omega_s_;
    std::size_t n_;
    std::vector<double> g_, b_, cos_, sin_;
};

}  // namespace

AngleCurveSet integrate_swing(const SwingSystem& sys, const SimConfig& config, const SwingObserver& observer)
{
    config.validate();
    const std::size_t n = sys.size();
    const std::size_t points = config.points();
    AngleCurveSet curves(n, points, AngleCurveSet::Origin::Simulated);
    curves.dt_out = config.dt_out;

    const double omega_s = 2.0 * std::numbers::pi * config.frequency_hz;
    SwingRhs rhs(sys, omega_s);
    const bool fault_stage = sys.faulted && sys.t_clear > 0.0;
    rhs.set_network(fault_stage ? sys.y_fault : sys.y_postfault);
    bool in_fault = fault_stage;

    std::vector<double> x(2 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) x[i] = sys.delta0[i];
    std::vector<double> k1(2 * n), k2(2 * n), k3(2 * n), k4(2 * n), tmp(2 * n);
    std::vector<double> delta(n), speed(n);

    const double cap = config.instability_angle_cap / kRadToDeg;
    const double eps = 1e-12;
    double t = 0.0;
    std::size_t next_point = 0;
    while (next_point < points) {
        const double t_sample = config.dt_out * static_cast<double>(next_point + 1);
        double t_next = std::min(t + config.h_step, t_sample);
        if (in_fault && sys.t_clear < t_next - eps) t_next = sys.t_clear;
        const double h = t_next - t;

        rhs(x, k1);
        for (std::size_t i = 0; i < 2 * n; ++i) tmp[i] = x[i] + 0.5 * h * k1[i];
        rhs(tmp, k2);
        for (std::size_t i = 0; i < 2 * n; ++i) tmp[i] = x[i] + 0.5 * h * k2[i];
        rhs(tmp, k3);
        for (std::size_t i = 0; i < 2 * n; ++i) tmp[i] = x[i] + h * k3[i];
        rhs(tmp, k4);
        for (std::size_t i = 0; i < 2 * n; ++i) x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        t = t_next;

        if (observer) {
            std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n), delta.begin());
            std::copy(x.begin() + static_cast<std::ptrdiff_t>(n), x.end(), speed.begin());
            observer(t, delta, speed);
        }
        if (in_fault && t >= sys.t_clear - eps) {
            in_fault = false;
            rhs.set_network(sys.y_postfault);
        }
        bool runaway = false;
        for (std::size_t i = 0; i < n; ++i)
            if (!std::isfinite(x[i]) || std::abs(x[i]) > cap) runaway = true;
        if (runaway) {
            curves.runaway = true;
            // Hold the last recorded values (or the last finite state) to the end.
            for (; next_point < points; ++next_point)
                for (std::size_t g = 0; g < n; ++g) {
                    const double v = next_point > 0 ? curves.at(g, next_point - 1) : sys.delta0[g] * kRadToDeg;
                    curves.at(g, next_point) =
                        std::isfinite(x[g]) ? std::clamp(x[g] * kRadToDeg, -config.instability_angle_cap,
                                                         config.instability_angle_cap)
                                            : v;
                }
            break;
        }
        if (std::abs(t - t_sample) <= eps) {
            for (std::size_t g = 0; g < n; ++g) curves.at(g, next_point) = x[g] * kRadToDeg;
            ++next_point;
        }
    }
    return curves;
}

AngleCurveSet simulate(const NetworkCase& net, const PowerFlowSolution& solution, const Contingency& contingency,
                       const SimConfig& config)
{
    validate_contingency(net, contingency);
    const SwingSystem sys = build_swing_system(net, solution, contingency, config);
    return integrate_swing(sys, config);
}

double max_angle_separation(const AngleCurveSet& curves)
{
    double worst = 0.0;
    for (std::size_t t = 0; t < curves.points; ++t) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < curves.generators; ++g) {
            lo = std::min(lo, curves.at(g, t));
            hi = std::max(hi, curves.at(g, t));
        }
        worst = std::max(worst, hi - lo);
    }
    return worst;
}

double tsi_from_separation(double separation_deg) { return (360.0 - separation_deg) / (360.0 + separation_deg); }

double tsi(const AngleCurveSet& curves)
{
    if (curves.generators == 0 || curves.points == 0) throw std::invalid_argument("tsi of an empty curve set");
    return tsi_from_separation(max_angle_separation(curves));
}

double forward_transform(double y)
{
    if (y > 1.0) return std::log(y);
    if (y < -1.0) return -std::log(-y);
    return 1.0;
}

double inverse_transform(double y_hat) { return y_hat >= 0.0 ? std::exp(y_hat) : -std::exp(-y_hat); }

}  // namespace gd2rl
