// One PASS/FAIL line per acceptance criterion. Criteria 5 and 9-12 train the
// desk-scale surrogate and agent, so a full run takes about 1 h on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "gd2rl/evaluation.hpp"
#include "gd2rl/power_flow.hpp"
#include "gradcheck.hpp"
#include "physics_oracles.hpp"
#include "reference_case39.hpp"
#include "toy_cases.hpp"

using namespace gd2rl;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double seconds_since(clock_type::time_point t0)
{
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(double x, int precision = 3)
{
    std::ostringstream os;
    os << std::setprecision(precision) << x;
    return os.str();
}

void note(const std::string& s)
{
    std::cerr << "  .. " << s << std::endl;
}

struct Verdict {
    bool pass = true;
    std::vector<std::string> parts;

    void check(bool ok, const std::string& what)
    {
        pass = pass && ok;
        parts.push_back(what + (ok ? "" : " [fail]"));
    }
    void info(const std::string& what) { parts.push_back(what); }
};

/// Artifacts shared by the expensive criteria, built on first use.
class Desk {
public:
    Desk(fs::path work) : work_(std::move(work)), net_(gd2rl::testing::shipped()) { fs::create_directories(work_); }

    const NetworkCase& net() const { return net_; }
    const fs::path& work() const { return work_; }

    const Dataset& dataset()
    {
        if (!data_) {
            note("generating the desk dataset");
            const auto t0 = clock_type::now();
            data_ = generate_dataset(net_, DatasetProtocol::desk(), 1);
            data_seconds_ = seconds_since(t0);
            write_dataset(*data_, (work_ / "dataset.csv").string());
            note("dataset: " + std::to_string(data_->records.size()) + " records in " + fmt(data_seconds_) + " s");
        }
        return *data_;
    }
    double dataset_seconds() const { return data_seconds_; }

    const SurrogateTrainResult& surrogate()
    {
        if (!surrogate_) {
            const Dataset& d = dataset();
            note("training the desk surrogate");
            const auto t0 = clock_type::now();
            surrogate_ = train_surrogate(net_, d, SurrogateTrainConfig::desk());
            surrogate_seconds_ = seconds_since(t0);
            save_surrogate(surrogate_->model, (work_ / "surrogate.bin").string());
            note("surrogate: " + fmt(surrogate_seconds_) + " s");
        }
        return *surrogate_;
    }
    double surrogate_seconds() const { return surrogate_seconds_; }

    const TrainResult& agent()
    {
        if (!agent_) {
            const SurrogateModel& model = surrogate().model;
            note("training the desk agent");
            const auto t0 = clock_type::now();
            agent_ = run_training(net_, model, TrainConfig::desk());
            agent_seconds_ = seconds_since(t0);
            save_agent((work_ / "agent").string(), agent_->best);
            std::ofstream log(work_ / "train_log.txt");
            for (const auto& e : agent_->log) log << format_episode(e) << '\n';
            note("agent: " + fmt(agent_seconds_) + " s, best episode " + std::to_string(agent_->best_episode));
        }
        return *agent_;
    }
    double agent_seconds() const { return agent_seconds_; }

    /// Held-out pool of scenarios that are unstable under the true simulator.
    const std::vector<ScenarioDistribution>& pool()
    {
        if (pool_.empty()) pool_ = hard_pool(net_, 20, 50, 777);
        return pool_;
    }

private:
    fs::path work_;
    NetworkCase net_;
    std::optional<Dataset> data_;
    double data_seconds_ = 0.0;
    std::optional<SurrogateTrainResult> surrogate_;
    double surrogate_seconds_ = 0.0;
    std::optional<TrainResult> agent_;
    double agent_seconds_ = 0.0;
    std::vector<ScenarioDistribution> pool_;
};

// 1 ---------------------------------------------------------------------------

Verdict power_flow_fidelity(Desk&)
{
    Verdict v;
    const NetworkCase net = gd2rl::testing::standard();
    const auto t0 = clock_type::now();
    const PowerFlowSolution sol = solve_power_flow(net, nominal_state(net));
    const double secs = seconds_since(t0);
    v.check(sol.converged, "converged in " + std::to_string(sol.iterations) + " iterations");
    double dv = 0.0, da = 0.0;
    for (const auto& bus : net.buses) {
        const auto i = net.bus_index(bus.id);
        const auto& ref = gd2rl::testing::kCase39Reference[bus.id - 1];
        dv = std::max(dv, std::abs(sol.v_mag[i] - ref.v_mag));
        da = std::max(da, std::abs(sol.v_ang[i] * kDeg - ref.v_ang_deg));
    }
    v.check(dv <= 1e-3, "max |dV| " + fmt(dv) + " pu (<=1e-3)");
    v.check(da <= 0.05, "max |dangle| " + fmt(da) + " deg (<=0.05)");

    const NetworkCase shipped = gd2rl::testing::shipped();
    Rng rng(21);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        const OperatingState s = sample_base_state(shipped, 0.8 + 0.2 * trial, rng);
        const PowerFlowModel model(shipped, s);
        const PowerFlowSolution ps = solve_power_flow(shipped, s);
        Eigen::VectorXd x = model.initial_guess(ps.converged ? &ps : nullptr);
        std::uniform_real_distribution<double> jitter(-0.05, 0.05);
        for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += jitter(rng);
        const Eigen::MatrixXd j = model.jacobian(x);
        const double step = 1e-6;
        for (Eigen::Index c = 0; c < x.size(); ++c) {
            Eigen::VectorXd xp = x, xm = x;
            xp[c] += step;
            xm[c] -= step;
            const Eigen::VectorXd fd = (model.mismatch(xp) - model.mismatch(xm)) / (2.0 * step);
            const double scale = std::max(1.0, j.col(c).cwiseAbs().maxCoeff());
            worst = std::max(worst, (fd - j.col(c)).cwiseAbs().maxCoeff() / scale);
        }
    }
    v.check(worst <= 1e-6, "Jacobian rel. error " + fmt(worst) + " (<=1e-6)");
    v.check(secs < 1.0, "solve " + fmt(secs) + " s (<1 s)");
    return v;
}

// 2 ---------------------------------------------------------------------------

double energy_drift(const SwingSystem& sys, const std::vector<double>& equilibrium, double h)
{
    SimConfig cfg;
    cfg.h_step = h;
    const double omega_s = 2.0 * std::numbers::pi * cfg.frequency_hz;
    const std::vector<double> zero(sys.size(), 0.0);
    const double w0 = gd2rl::testing::lossless_energy(sys, sys.y_postfault, omega_s, sys.delta0, zero);
    const double w_eq = gd2rl::testing::lossless_energy(sys, sys.y_postfault, omega_s, equilibrium, zero);
    double worst = 0.0;
    integrate_swing(sys, cfg, [&](double, const std::vector<double>& d, const std::vector<double>& w) {
        worst = std::max(worst, std::abs(gd2rl::testing::lossless_energy(sys, sys.y_postfault, omega_s, d, w) - w0));
    });
    return worst / (w0 - w_eq);
}

Verdict simulator_physics(Desk&)
{
    Verdict v;
    const auto t0 = clock_type::now();
    const NetworkCase net = gd2rl::testing::shipped();
    const PowerFlowSolution sol = solve_power_flow(net, nominal_state(net));
    SwingSystem sys = build_swing_system(net, sol, Contingency::none());
    ComplexMatrix y = sys.y_prefault;
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        for (Eigen::Index j = 0; j < y.cols(); ++j) y(i, j) = Complex(0.0, y(i, j).imag());
    sys.y_prefault = sys.y_fault = sys.y_postfault = y;
    sys.p_mech = electrical_power(y, sys.emf, sys.delta0);
    std::fill(sys.d.begin(), sys.d.end(), 0.0);
    const std::vector<double> eq = sys.delta0;
    for (std::size_t i = 0; i < sys.size(); ++i) sys.delta0[i] += (i % 2 == 0 ? 8.0 : -6.0) / kDeg;
    const double coarse = energy_drift(sys, eq, 0.005);
    const double fine = energy_drift(sys, eq, 0.0025);
    v.check(coarse < 1e-3, "energy drift " + fmt(100.0 * coarse) + " % (<0.1 %)");
    v.check(coarse / fine >= 12.0, "halving ratio " + fmt(coarse / fine) + " (>=12)");

    const gd2rl::testing::Smib smib;
    const double tcr = smib.critical_clearing_time();
    const SimConfig cfg;
    auto separation = [&](double t_clear) { return max_angle_separation(integrate_swing(smib.system(t_clear), cfg)); };
    const double below = separation(tcr - cfg.h_step);
    const double above = separation(tcr + cfg.h_step);
    v.check(below < 180.0 && above > 360.0, "SMIB t_cr " + fmt(tcr, 4) + " s: sep " + fmt(below) + " deg at -h, " +
                                                fmt(above) + " deg at +h");
    const double secs = seconds_since(t0);
    v.check(secs < 60.0, fmt(secs) + " s (<60 s)");
    return v;
}

// 3 ---------------------------------------------------------------------------

Verdict transform_identities(Desk&)
{
    Verdict v;
    Rng rng(2);
    std::uniform_real_distribution<double> mag(0.0, 9.0);
    std::uniform_real_distribution<double> lin(1.0, 50.0);
    double worst = 0.0;
    std::size_t n = 0;
    for (int k = 0; k < 20000; ++k) {
        const double m = k % 2 ? std::exp(mag(rng)) : lin(rng);
        const double y = (k % 4 < 2 ? 1.0 : -1.0) * m;
        if (std::abs(y) <= 1.0) continue;
        worst = std::max(worst, std::abs(inverse_transform(forward_transform(y)) - y) / std::abs(y));
        ++n;
    }
    v.check(worst < 1e-12, "round trip max rel. error " + fmt(worst) + " over " + std::to_string(n) + " values (<1e-12)");
    const bool exact = tsi_from_separation(0.0) == 1.0 && tsi_from_separation(360.0) == 0.0 &&
                       tsi_from_separation(720.0) == -1.0 / 3.0;
    v.check(exact, "TSI(0)=" + fmt(tsi_from_separation(0.0), 17) + " TSI(360)=" + fmt(tsi_from_separation(360.0), 17) +
                       " TSI(720)=" + fmt(tsi_from_separation(720.0), 17));
    return v;
}

// 4 ---------------------------------------------------------------------------

Parameter& random_param(ParameterSet& ps, const std::string& name, Eigen::Index r, Eigen::Index c, Rng& rng,
                        double lo = -1.0, double hi = 1.0)
{
    Parameter& p = ps.add(name, r, c);
    std::uniform_real_distribution<double> u(lo, hi);
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
        double x = u(rng);
        if (std::abs(x) < 0.05) x += x < 0 ? -0.05 : 0.05;
        p.value.data()[k] = x;
    }
    return p;
}

Var weighted_sum(Tape& t, Var x)
{
    Matrix w(x.rows(), x.cols());
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = 0.3 + 0.1 * static_cast<double>(k % 7);
    return ag::sum(ag::mul(x, t.constant(w)));
}

double primitive_worst(std::string& worst_name)
{
    Rng rng(7);
    ParameterSet ps;
    random_param(ps, "a", 4, 3, rng);
    random_param(ps, "b", 3, 5, rng);
    random_param(ps, "c", 4, 3, rng);
    random_param(ps, "row", 1, 3, rng);
    random_param(ps, "s", 1, 1, rng);
    random_param(ps, "bias", 1, 5, rng);
    random_param(ps, "pos", 4, 3, rng, 0.2, 2.0);
    ParameterSet conv;
    random_param(conv, "x", 8, 3, rng);
    random_param(conv, "w", 6, 4, rng);
    random_param(conv, "b", 1, 4, rng);
    auto P = [](Tape& t, ParameterSet& p, const char* n) { return t.parameter(p.at(n)); };
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{3, 0, 0, 2, 1, 3});
    auto wts = std::make_shared<const std::vector<double>>(std::vector<double>{0.5, 1.0, 0.25, 2.0, 1.5, 0.3});
    using F = gd2rl::testing::LossFn;
    const std::vector<std::pair<std::string, F>> cases = {
        {"matmul", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::matmul(P(t, p, "a"), P(t, p, "b"))); }},
        {"add", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::add(P(t, p, "a"), P(t, p, "c"))); }},
        {"add row", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::add(P(t, p, "a"), P(t, p, "row"))); }},
        {"add scalar", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::add(P(t, p, "a"), P(t, p, "s"))); }},
        {"sub", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::sub(P(t, p, "a"), P(t, p, "row"))); }},
        {"mul", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::mul(P(t, p, "a"), P(t, p, "c"))); }},
        {"mul row", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::mul(P(t, p, "a"), P(t, p, "row"))); }},
        {"scale", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::scale(P(t, p, "a"), -2.5)); }},
        {"add_scalar", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(ag::add_scalar(P(t, p, "a"), 0.7))); }},
        {"linear",
         [&](Tape& t, ParameterSet& p) {
             return weighted_sum(t, ag::tanh(ag::linear(P(t, p, "c"), P(t, p, "b"), P(t, p, "bias"))));
         }},
        {"tanh", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::tanh(P(t, p, "a"))); }},
        {"relu", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::relu(P(t, p, "a"))); }},
        {"exp", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::exp(P(t, p, "a"))); }},
        {"log", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::log(P(t, p, "pos"))); }},
        {"sqrt", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::sqrt(P(t, p, "pos"))); }},
        {"abs", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::abs(P(t, p, "a"))); }},
        {"square", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(P(t, p, "a"))); }},
        {"clamp", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::clamp(P(t, p, "a"), -0.5, 0.6)); }},
        {"softmax", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::softmax_rows(P(t, p, "a"))); }},
        {"log_softmax", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::log_softmax_rows(P(t, p, "a"))); }},
        {"sum", [&](Tape& t, ParameterSet& p) { return ag::square(ag::sum(P(t, p, "a"))); }},
        {"mean", [&](Tape& t, ParameterSet& p) { return ag::square(ag::mean(P(t, p, "a"))); }},
        {"sum_rows", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(ag::sum_rows(P(t, p, "a")))); }},
        {"sum_cols", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(ag::sum_cols(P(t, p, "a")))); }},
        {"concat_cols",
         [&](Tape& t, ParameterSet& p) {
             return weighted_sum(t, ag::square(ag::concat_cols({P(t, p, "a"), P(t, p, "c"), P(t, p, "a")})));
         }},
        {"concat_rows",
         [&](Tape& t, ParameterSet& p) {
             return weighted_sum(t, ag::square(ag::concat_rows({P(t, p, "a"), P(t, p, "row")})));
         }},
        {"slices",
         [&](Tape& t, ParameterSet& p) {
             return weighted_sum(t, ag::square(ag::slice_cols(ag::slice_rows(P(t, p, "b"), 1, 2), 2, 3)));
         }},
        {"gather", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(ag::gather_rows(P(t, p, "a"), idx))); }},
        {"scatter",
         [&](Tape& t, ParameterSet& p) {
             auto six = ag::concat_rows({P(t, p, "a"), ag::slice_rows(P(t, p, "c"), 0, 2)});
             return weighted_sum(t, ag::square(ag::scatter_rows(six, idx, wts, 5)));
         }},
        {"segment_mean", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::square(ag::segment_mean(P(t, p, "a"), 2))); }},
        {"segment_std", [&](Tape& t, ParameterSet& p) { return weighted_sum(t, ag::segment_std(P(t, p, "a"), 2)); }},
        {"conv1d k1",
         [&](Tape& t, ParameterSet& p) {
             return weighted_sum(t, ag::square(ag::conv1d(P(t, p, "a"), ag::slice_cols(P(t, p, "b"), 0, 2),
                                                          ag::slice_cols(P(t, p, "row"), 0, 2), 1, 2)));
         }},
    };
    double worst = 0.0;
    for (const auto& [name, f] : cases) {
        const auto r = gd2rl::testing::grad_check(ps, f);
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_name = name;
        }
    }
    const auto r = gd2rl::testing::grad_check(conv, [&](Tape& t, ParameterSet& p) {
        return weighted_sum(t, ag::square(ag::conv1d(P(t, p, "x"), P(t, p, "w"), P(t, p, "b"), 2, 4)));
    });
    if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        worst_name = "conv1d k2";
    }
    return worst;
}

double surrogate_graph_worst(const SurrogateConfig& config, std::size_t points, Eigen::Index stride)
{
    const NetworkCase net = gd2rl::testing::shipped();
    const GraphTemplate tpl = make_graph_template(net);
    const auto lines = net.faultable_lines();
    Rng rng(7);
    std::vector<HeteroGraph> raw;
    while (raw.size() < 4) {
        const OperatingState s = sample_base_state(net, 1.0, rng);
        const PowerFlowSolution sol = solve_power_flow(net, s);
        if (!sol.converged) continue;
        raw.push_back(build_graph(tpl, net, s, sol, Contingency{lines[raw.size() % lines.size()], 0.5, 0.1}));
    }
    Rng init(11);
    SurrogateModel m = SurrogateModel::create(net, points, config, init);
    m.stats = fit_norm_stats(raw);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (std::size_t i = 0; i < m.params.size(); ++i)
        if (m.params[i].value.rows() == 1)
            for (Eigen::Index k = 0; k < m.params[i].value.size(); ++k) m.params[i].value.data()[k] = u(rng);
    std::vector<HeteroGraph> prepared;
    for (const auto& g : raw) prepared.push_back(prepare_graph(m, g));
    std::vector<const HeteroGraph*> ptrs;
    for (const auto& g : prepared) ptrs.push_back(&g);
    const GraphBatch batch = stack_graphs(ptrs);
    const BatchLayout layout = BatchLayout::make(m.tpl, 4);
    Matrix labels(4, static_cast<Eigen::Index>(m.generators * points));
    for (Eigen::Index k = 0; k < labels.size(); ++k) labels.data()[k] = u(rng) * 30.0;
    return gd2rl::testing::grad_check(
               m.params,
               [&](Tape& t, ParameterSet&) {
                   const SurrogateForward f = surrogate_forward(m, t, batch, layout);
                   return ag::mean(ag::square(ag::sub(f.curves, t.constant(labels))));
               },
               1e-6, 1e-4, stride)
        .max_rel_error;
}

AgentConfig tiny_agent(CriticKind kind)
{
    AgentConfig c;
    c.state_width = 6;
    c.conv1 = 5;
    c.conv2 = 4;
    c.hidden1 = 7;
    c.hidden2 = 6;
    c.actions = 3;
    c.critic = kind;
    return c;
}

Matrix random_state(Rng& rng, Eigen::Index m, Eigen::Index width)
{
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix s(m, width);
    for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = n(rng);
    return s;
}

void scramble(ParameterSet& ps, Rng& rng, double scale = 0.5)
{
    std::uniform_real_distribution<double> u(-scale, scale);
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (Eigen::Index k = 0; k < ps[i].value.size(); ++k) ps[i].value.data()[k] = u(rng);
}

std::vector<Transition> random_transitions(Rng& rng, const AgentConfig& c, std::size_t count, Eigen::Index m)
{
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<Transition> out;
    for (std::size_t i = 0; i < count; ++i) {
        Transition t;
        t.state = std::make_shared<Matrix>(random_state(rng, m, static_cast<Eigen::Index>(c.state_width)));
        t.next_state = std::make_shared<Matrix>(random_state(rng, m, static_cast<Eigen::Index>(c.state_width)));
        for (std::size_t g = 0; g < c.actions; ++g) t.action.push_back(80.0 * u(rng));
        t.pf_reward = u(rng);
        for (Eigen::Index k = 0; k < m; ++k) t.tsi_rewards.push_back(u(rng));
        t.terminal = i % 2 == 1;
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<const Transition*> pointers(const std::vector<Transition>& ts)
{
    std::vector<const Transition*> p;
    for (const auto& t : ts) p.push_back(&t);
    return p;
}

double agent_graph_worst()
{
    Rng rng(9);
    double worst = 0.0;
    for (CriticKind kind : {CriticKind::Distributional, CriticKind::Scalar}) {
        const AgentConfig cfg = tiny_agent(kind);
        AgentNets nets = AgentNets::create(cfg, rng);
        AgentNets target = AgentNets::create(cfg, rng);
        scramble(nets.critic, rng);
        scramble(nets.actor, rng);
        scramble(target.critic, rng);
        auto batch = random_transitions(rng, cfg, 2, 3);
        batch[0].tsi_rewards[1] = kNaN;
        const auto ptrs = pointers(batch);
        auto closs = [&](Tape& t, ParameterSet&) { return critic_loss(t, nets, target, ptrs, 0.99).total; };
        const std::vector<double> cost{6.0, 4.5, 9.0};
        auto aloss = [&](Tape& t, ParameterSet&) { return actor_loss(t, nets, ptrs, cost, 0.1, 100.0); };
        worst = std::max({worst, gd2rl::testing::grad_check(nets.critic, closs).max_rel_error,
                          gd2rl::testing::grad_check(nets.conv, closs).max_rel_error,
                          gd2rl::testing::grad_check(nets.actor, aloss).max_rel_error});
    }
    return worst;
}

Verdict autodiff(Desk&)
{
    Verdict v;
    const auto t0 = clock_type::now();
    std::string name;
    const double prim = primitive_worst(name);
    v.check(prim < 1e-5, "primitives " + fmt(prim) + " (worst " + name + ", <1e-5)");
    const double tiny = surrogate_graph_worst(SurrogateConfig{5, 2, 6, 5, 12.0}, 4, 1);
    const double full = surrogate_graph_worst(SurrogateConfig{}, 100, 97);
    v.check(std::max(tiny, full) < 1e-4, "surrogate graph " + fmt(std::max(tiny, full)) + " (<1e-4)");
    const double agent = agent_graph_worst();
    v.check(agent < 1e-4, "critic/actor graphs " + fmt(agent) + " (<1e-4)");
    const double secs = seconds_since(t0);
    v.check(secs < 120.0, fmt(secs) + " s (<120 s)");
    return v;
}

// 5 ---------------------------------------------------------------------------

Verdict surrogate_quality(Desk& desk)
{
    Verdict v;
    const Dataset& data = desk.dataset();
    const SurrogateTrainResult& r = desk.surrogate();
    v.info(std::to_string(data.records.size()) + " records");
    v.check(r.test.acc >= 90.0, "test acc " + fmt(r.test.acc) + " % (>=90)");
    v.check(r.test.mpec <= 15.0, "test MPEC " + fmt(r.test.mpec) + " % (<=15)");

    // Overfit probe: 32 records spread over levels and faults.
    note("overfit probe");
    const auto t0 = clock_type::now();
    std::vector<std::size_t> recs(32);
    for (std::size_t k = 0; k < recs.size(); ++k) recs[k] = (k * 90) % data.records.size();
    Rng rng(3);
    SurrogateModel probe = SurrogateModel::create(desk.net(), data.points, {}, rng);
    fit_steps(probe, data, recs, 6000, 0.003, 32, rng);
    fit_steps(probe, data, recs, 4000, 0.001, 32, rng);
    const double probe_mpec = surrogate_metrics(probe, data, recs).mpec;
    const double probe_secs = seconds_since(t0);
    v.check(probe_mpec < 1.0, "overfit MPEC " + fmt(probe_mpec) + " % (<1)");
    const double secs = desk.dataset_seconds() + desk.surrogate_seconds();
    v.check(secs < 7200.0, "dataset + training " + fmt(secs) + " s (<7200 s)");
    v.info("probe " + fmt(probe_secs) + " s");
    return v;
}

// 6 ---------------------------------------------------------------------------

Verdict surrogate_speedup(Desk& desk)
{
    Verdict v;
    const NetworkCase& net = desk.net();
    SurrogateModel model = desk.surrogate().model;
    Rng rng(2);
    const OperatingState s = sample_base_state(net, 1.0, rng);
    const PowerFlowSolution sol = solve_power_flow(net, s);
    const Contingency c{net.faultable_lines().front(), 0.5, 0.1};
    const HeteroGraph g = prepare_graph(model, build_graph(model.tpl, net, s, sol, c));
    const std::vector<HeteroGraph> graphs(1000, g);
    auto t0 = clock_type::now();
    for (std::size_t k = 0; k < graphs.size(); ++k) simulate(net, sol, c);
    const double sim = seconds_since(t0);
    double pred = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
        t0 = clock_type::now();
        const auto curves = predict_curves(model, graphs);
        pred = std::min(pred, seconds_since(t0));
    }
    v.info("simulate " + fmt(sim) + " s, predict_curves " + fmt(pred) + " s");
    v.check(sim / pred >= 50.0, "speedup " + fmt(sim / pred) + "x (>=50)");
    return v;
}

// 7 ---------------------------------------------------------------------------

double kernel_mass(double value, std::size_t i)
{
    const double x = std::clamp(value, -1.0, 1.0);
    return std::max(0.0, 1.0 - std::abs(x - (-1.0 + 0.04 * static_cast<double>(i))) / 0.04);
}

CategoricalTsiDistribution random_distribution(Rng& rng, double zero_fraction = 0.3)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    CategoricalTsiDistribution d;
    for (auto& p : d.probs) p = u(rng) < zero_fraction ? 0.0 : u(rng);
    d.probs[static_cast<std::size_t>(u(rng) * 50.0)] += 0.1;
    const double s = d.total();
    for (auto& p : d.probs) p /= s;
    return d;
}

Verdict distributional(Desk&)
{
    Verdict v;
    double norm = 0.0;
    std::size_t emitted = 0;
    auto track = [&](const CategoricalTsiDistribution& d) {
        norm = std::max(norm, std::abs(d.total() - 1.0));
        ++emitted;
    };
    Rng rng(4);
    std::uniform_real_distribution<double> u(-1.5, 1.5);

    double mean_err = 0.0, mass_err = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> x(1 + static_cast<std::size_t>(trial % 9));
        double clipped = 0.0;
        for (auto& e : x) clipped += std::clamp(e = u(rng), -1.0, 1.0) / static_cast<double>(x.size());
        std::vector<double> inside(x);
        for (auto& e : inside) e = std::clamp(e, -1.0, 1.0);
        const auto d = empirical_tsi_distribution(inside);
        track(d);
        mean_err = std::max(mean_err, std::abs(d.mean() - clipped));
        inside.push_back(kNaN);
        track(tsi_histogram(inside));
    }
    for (std::size_t m = 1; m <= 5; ++m)
        for (double gamma : {1.0, 0.99, 0.5})
            for (bool terminal : {false, true})
                for (int trial = 0; trial < 20; ++trial) {
                    std::vector<double> rewards(m);
                    for (auto& x : rewards) x = u(rng);
                    if (trial % 4 == 0) rewards[0] = 0.04 * std::round(rewards[0] / 0.04);
                    const auto next = random_distribution(rng);
                    const auto got = categorical_target(rewards, next, gamma, terminal);
                    track(got);
                    CategoricalTsiDistribution oracle;
                    double clipped_mean = 0.0;
                    const double w = 1.0 / static_cast<double>(m);
                    for (double rk : rewards) {
                        if (terminal) {
                            clipped_mean += w * std::clamp(rk, -1.0, 1.0);
                            for (std::size_t i = 0; i < kAtoms; ++i) oracle.probs[i] += w * kernel_mass(rk, i);
                            continue;
                        }
                        for (std::size_t j = 0; j < kAtoms; ++j) {
                            const double x = rk + gamma * atom(j);
                            clipped_mean += w * next.probs[j] * std::clamp(x, -1.0, 1.0);
                            for (std::size_t i = 0; i < kAtoms; ++i) oracle.probs[i] += w * next.probs[j] * kernel_mass(x, i);
                        }
                    }
                    mean_err = std::max(mean_err, std::abs(got.mean() - clipped_mean));
                    for (std::size_t i = 0; i < kAtoms; ++i)
                        mass_err = std::max(mass_err, std::abs(got.probs[i] - oracle.probs[i]));
                    track(shift_distribution(random_distribution(rng), next));
                }

    Rng nets_rng(5);
    AgentNets nets = AgentNets::create(AgentConfig{}, nets_rng);
    scramble(nets.actor, nets_rng, 0.3);
    scramble(nets.critic, nets_rng, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix s = (trial % 2 ? 100.0 : 1.0) * random_state(nets_rng, 50, 60);
        track(evaluate_critic(nets, s, act(nets, s)).tsi);
    }
    v.check(norm <= 1e-9, std::to_string(emitted) + " distributions, max |sum-1| " + fmt(norm) + " (<=1e-9)");
    v.check(mean_err <= 1e-12, "clipped-mean error " + fmt(mean_err) + " (<=1e-12)");
    v.check(mass_err <= 1e-12, "brute-force mass error " + fmt(mass_err) + " (<=1e-12, m<=5)");

    // KL zero iff the critic equals the projected target: constant critics
    // built from the target's logits.
    const AgentConfig cfg = tiny_agent(CriticKind::Distributional);
    Rng krng(7);
    AgentNets online = AgentNets::create(cfg, krng);
    AgentNets target = AgentNets::create(cfg, krng);
    const auto q = random_distribution(krng, 0.0);
    Matrix bias(1, 52);
    bias(0, 0) = -0.3;
    for (std::size_t i = 0; i < kAtoms; ++i) bias(0, static_cast<Eigen::Index>(i + 1)) = std::log(q.probs[i]) + 0.7;
    auto constant_output = [](ParameterSet& critic, const Matrix& b) {
        critic.at("l3/w").value.setZero();
        critic.at("l3/b").value = b;
    };
    constant_output(target.critic, bias);
    auto batch = random_transitions(krng, cfg, 2, 4);
    for (auto& t : batch) {
        t.terminal = false;
        std::fill(t.tsi_rewards.begin(), t.tsi_rewards.end(), 0.0);
        t.pf_reward = 0.05;
    }
    Matrix ob = bias;
    ob(0, 0) = 0.05 + bias(0, 0);
    constant_output(online.critic, ob);
    double at_target = 0.0;
    {
        Tape t;
        at_target = critic_loss(t, online, target, pointers(batch), 1.0).tsi;
    }
    double min_off = 1e300;
    Rng prng(8);
    std::normal_distribution<double> nd(0.0, 0.2);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix pb = ob;
        for (std::size_t i = 1; i <= kAtoms; ++i) pb(0, static_cast<Eigen::Index>(i)) += nd(prng);
        constant_output(online.critic, pb);
        Tape t;
        min_off = std::min(min_off, critic_loss(t, online, target, pointers(batch), 1.0).tsi);
    }
    v.check(std::abs(at_target) <= 1e-12 && min_off > 1e-6,
            "KL at target " + fmt(at_target) + ", min KL off target " + fmt(min_off));
    return v;
}

// 8 ---------------------------------------------------------------------------

Verdict telescoping(Desk& desk)
{
    Verdict v;
    const NetworkCase& net = desk.net();
    const SurrogateModel& model = desk.surrogate().model;
    RedispatchEnv env(net, model);
    const auto pool = mixed_pool(net, 10, 20, 4242);
    Rng rng(8);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    double worst = 0.0, worst_pf = 0.0;
    std::size_t checked = 0, rollouts = 0, diverged = 0;
    for (const auto& scenario : pool)
        for (int r = 0; r < 3; ++r) {
            const EnvState s0 = env.observe(scenario);
            EnvState s = s0;
            std::vector<double> sum(s0.samples(), 0.0);
            double sum_pf = 0.0;
            for (int t = 0; t < 5; ++t) {
                std::vector<double> a(net.adjustable().size());
                for (auto& x : a) x = u(rng);
                StepOutcome o = env.step(s, a);
                for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += o.rewards.tsi[k];
                sum_pf += o.rewards.pf;
                s = std::move(o.next);
            }
            for (std::size_t k = 0; k < sum.size(); ++k) {
                if (std::isnan(sum[k])) {
                    ++diverged;
                    continue;
                }
                worst = std::max(worst, std::abs(sum[k] - (s.values.tsi[k] - s0.values.tsi[k])));
                ++checked;
            }
            worst_pf = std::max(worst_pf, std::abs(sum_pf - (s.mean_pf() - s0.mean_pf())));
            ++rollouts;
        }
    v.check(checked > 0 && worst <= 1e-12, std::to_string(rollouts) + " random rollouts, " + std::to_string(checked) +
                                               " samples, max |sum r - (TSI_T - TSI_0)| " + fmt(worst) + " (<=1e-12)");
    v.info(std::to_string(diverged) + " samples diverged along the way");
    v.check(worst_pf <= 1e-12, "power-flow reward telescopes to " + fmt(worst_pf));
    return v;
}

// 9 ---------------------------------------------------------------------------

double mean_actor_loss(const std::vector<EpisodeLog>& log, std::size_t from, std::size_t to)
{
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = from; i < to && i < log.size(); ++i)
        if (!std::isnan(log[i].actor_loss)) {
            s += log[i].actor_loss;
            ++n;
        }
    return n ? s / static_cast<double>(n) : kNaN;
}

Verdict learning_smoke(Desk& desk)
{
    Verdict v;
    const TrainResult& r = desk.agent();
    const auto& pool = desk.pool();
    const SurrogateModel& model = desk.surrogate().model;
    EvaluationOptions o;
    o.policy = PolicyKind::Zero;
    const EvaluationReport zero = evaluate_policy(desk.net(), model, nullptr, pool, o);
    o.policy = PolicyKind::Random;
    const EvaluationReport random = evaluate_policy(desk.net(), model, nullptr, pool, o);
    o.policy = PolicyKind::Agent;
    const EvaluationReport agent = evaluate_policy(desk.net(), model, &r.best, pool, o);
    std::ofstream(desk.work() / "evaluation.txt") << format_report(agent);
    const double lift = agent.mean_post() - zero.mean_post();
    v.info("zero " + fmt(zero.mean_post()) + " %, random " + fmt(random.mean_post()) + " %, agent " +
           fmt(agent.mean_post()) + " % at " + fmt(agent.mean_cost()) + " $");
    v.check(lift >= 20.0, "lift " + fmt(lift) + " pp (>=20)");

    std::size_t first = 0;
    while (first < r.log.size() && std::isnan(r.log[first].actor_loss)) ++first;
    const std::size_t learning = r.log.size() - first;
    const std::size_t window = std::max<std::size_t>(learning / 10, 1);
    const double early = mean_actor_loss(r.log, first, first + window);
    const double late = mean_actor_loss(r.log, r.log.size() - window, r.log.size());
    v.check(late < 0.0 && late < early, "actor loss " + fmt(early) + " -> " + fmt(late));
    v.check(desk.agent_seconds() < 4.0 * 3600.0, "training " + fmt(desk.agent_seconds()) + " s (<14400 s)");
    return v;
}

// 10 --------------------------------------------------------------------------

Verdict baseline_sanity(Desk& desk)
{
    Verdict v;
    PsoConfig sphere_cfg;
    sphere_cfg.bound = 5.12;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const PsoResult r = pso_maximize(
            [](const std::vector<double>& x) { return -std::inner_product(x.begin(), x.end(), x.begin(), 0.0); }, 3,
            sphere_cfg, rng);
        worst = std::max(worst, -r.best_value);
    }
    v.check(worst <= 1e-3, "sphere worst of 20 seeds " + fmt(worst) + " (<=1e-3)");

    const TrainResult& agent = desk.agent();
    const std::vector<ScenarioDistribution> two(desk.pool().begin(), desk.pool().begin() + 2);
    EvaluationOptions o;
    const EvaluationReport rep = evaluate_policy(desk.net(), desk.surrogate().model, &agent.best, two, o);
    const TrainConfig tc = TrainConfig::desk();
    for (std::size_t k = 0; k < two.size(); ++k) {
        note("PSO on scenario " + std::to_string(k));
        Rng rng(1 + k);
        const PsoRedispatch p = pso_redispatch(desk.net(), nullptr, two[k], FitnessBackend::TrueSim, PsoConfig{}, tc.mu,
                                               tc.cost_base, rng);
        const auto& a = rep.scenarios[k];
        const std::string id = "s" + std::to_string(k) + ": ";
        v.check(p.confidence >= a.post_confidence - 5.0,
                id + "PSO " + fmt(p.confidence) + " % vs agent " + fmt(a.post_confidence) + " %");
        v.check(a.agent_seconds < 0.01 * p.seconds,
                "agent " + fmt(a.agent_seconds) + " s vs PSO " + fmt(p.seconds) + " s (<1 %)");
    }
    return v;
}

// 11 --------------------------------------------------------------------------

Verdict distrl_direction(Desk& desk)
{
    Verdict v;
    note("training 3 seeds x {distrl, scalar} at budget 50");
    const auto rows = compare_rl(desk.net(), desk.surrogate().model, TrainConfig::desk(), {50}, {1, 2, 3}, desk.pool(),
                                 [](const ComparisonRow& r) {
                                     note(r.method + " seed " + std::to_string(r.seed) + ": " + fmt(r.confidence) + " %");
                                 });
    std::ofstream(desk.work() / "comparison.txt") << format_comparison(rows);
    double d = 0.0, s = 0.0;
    std::string per_seed;
    for (const auto& r : rows) (r.method == "distrl" ? d : s) += r.confidence / 3.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        double ds = 0.0, ss = 0.0;
        for (const auto& r : rows)
            if (r.seed == seed) (r.method == "distrl" ? ds : ss) = r.confidence;
        per_seed += " " + fmt(ds) + "/" + fmt(ss);
    }
    v.info("per seed distrl/scalar" + per_seed);
    v.check(d >= s, "mean distrl " + fmt(d) + " % vs scalar " + fmt(s) + " %");
    return v;
}

// 12 --------------------------------------------------------------------------

std::string history_text(const std::vector<EpochLog>& h)
{
    std::ostringstream os;
    os << std::setprecision(17);
    for (const auto& e : h) os << e.epoch << ' ' << e.lr << ' ' << e.train_mse << ' ' << e.validation_mse << '\n';
    return os.str();
}

std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism(Desk& desk)
{
    Verdict v;
    const NetworkCase& net = desk.net();
    note("second dataset generation");
    const Dataset again = generate_dataset(net, DatasetProtocol::desk(), 1);
    write_dataset(again, (desk.work() / "dataset_again.csv").string());
    const Dataset& first = desk.dataset();
    v.check(again.records == first.records &&
                read_file(desk.work() / "dataset.csv") == read_file(desk.work() / "dataset_again.csv"),
            "dataset identical (" + std::to_string(again.records.size()) + " records)");

    note("second surrogate training");
    const SurrogateTrainResult& s1 = desk.surrogate();
    const SurrogateTrainResult s2 = train_surrogate(net, again, SurrogateTrainConfig::desk());
    save_surrogate(s2.model, (desk.work() / "surrogate_again.bin").string());
    v.check(history_text(s1.history) == history_text(s2.history) &&
                read_file(desk.work() / "surrogate.bin") == read_file(desk.work() / "surrogate_again.bin"),
            "surrogate log and weights identical (" + std::to_string(s1.history.size()) + " epochs)");

    note("second agent training");
    const TrainResult& a1 = desk.agent();
    const TrainResult a2 = run_training(net, s2.model, TrainConfig::desk());
    std::size_t same = 0;
    for (std::size_t i = 0; i < std::min(a1.log.size(), a2.log.size()); ++i)
        same += format_episode(a1.log[i]) == format_episode(a2.log[i]);
    v.check(a1.log.size() == a2.log.size() && same == a1.log.size(),
            "agent log identical (" + std::to_string(same) + "/" + std::to_string(a1.log.size()) + " episodes)");
    return v;
}

struct Criterion {
    int id;
    const char* name;
    std::function<Verdict(Desk&)> run;
};

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks; one PASS/FAIL line per criterion"};
    std::vector<int> only;
    std::string work = "acceptance_work";
    std::string report;
    app.add_option("--only", only, "Criterion numbers to run (default: all)")->delimiter(',');
    app.add_option("--work-dir", work, "Directory for trained artifacts");
    app.add_option("--report", report, "Also write the verdict lines to this file");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria = {
        {1, "power-flow fidelity", power_flow_fidelity},
        {2, "simulator order and physics", simulator_physics},
        {3, "transform and TSI identities", transform_identities},
        {4, "autodiff gradient checks", autodiff},
        {5, "surrogate quality", surrogate_quality},
        {6, "surrogate speedup", surrogate_speedup},
        {7, "distributional machinery", distributional},
        {8, "telescoping identity", telescoping},
        {9, "learning smoke test", learning_smoke},
        {10, "baseline sanity", baseline_sanity},
        {11, "distrl vs scalar direction", distrl_direction},
        {12, "determinism", determinism},
    };
    const std::set<int> chosen(only.begin(), only.end());
    Desk desk(work);
    std::ostringstream lines;
    int failed = 0;
    for (const auto& c : criteria) {
        if (!chosen.empty() && !chosen.count(c.id)) continue;
        std::cerr << "criterion " << c.id << ": " << c.name << std::endl;
        const auto t0 = clock_type::now();
        Verdict v;
        try {
            v = c.run(desk);
        } catch (const std::exception& e) {
            v.check(false, std::string("exception: ") + e.what());
        }
        std::string line = std::string(v.pass ? "[PASS] " : "[FAIL] ") + std::to_string(c.id) + " " + c.name + ":";
        for (std::size_t i = 0; i < v.parts.size(); ++i) line += (i ? "; " : " ") + v.parts[i];
        line += " (" + fmt(seconds_since(t0)) + " s)";
        std::cout << line << std::endl;
        lines << line << '\n';
        failed += !v.pass;
    }
    if (!report.empty()) std::ofstream(report) << lines.str();
    return failed ? 1 : 0;
}
