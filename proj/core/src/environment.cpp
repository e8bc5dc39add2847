#include "gd2rl/environment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gd2rl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::size_t EnvState::diverged() const
{
    return static_cast<std::size_t>(std::count_if(values.tsi.begin(), values.tsi.end(), [](double v) { return std::isnan(v); }));
}

double EnvState::stable_fraction() const
{
    if (values.tsi.empty()) return 0.0;
    const auto stable = std::count_if(values.tsi.begin(), values.tsi.end(), [](double v) { return v > 0.0; });
    return static_cast<double>(stable) / static_cast<double>(values.tsi.size());
}

double EnvState::mean_tsi() const
{
    double s = 0.0;
    std::size_t n = 0;
    for (double v : values.tsi)
        if (!std::isnan(v)) {
            s += v;
            ++n;
        }
    return n ? s / static_cast<double>(n) : kNaN;
}

double EnvState::mean_pf() const
{
    if (values.pf.empty()) return 0.0;
    double s = 0.0;
    for (double v : values.pf) s += v;
    return s / static_cast<double>(values.pf.size());
}

RedispatchEnv::RedispatchEnv(const NetworkCase& net, const SurrogateModel& surrogate, Precision precision)
    : net_(&net), surrogate_(&surrogate), engine_(surrogate, precision)
{
    if (surrogate.stats.empty()) throw std::invalid_argument("surrogate model has no normalization statistics");
    if (surrogate.tpl.gen_count() != net.generators.size())
        throw ShapeError("surrogate model does not match the network");
}

EnvState RedispatchEnv::observe(ScenarioDistribution scenario, const std::vector<PowerFlowSolution>* warm)
{
    const std::size_t m = scenario.samples.size();
    if (m == 0) throw std::invalid_argument("scenario without samples");
    if (warm && warm->size() != m) throw std::invalid_argument("warm-start solutions do not match the samples");
    EnvState out;
    out.solutions.resize(m);
    out.values.pf.assign(m, kPsiMin);
    out.values.tsi.assign(m, kNaN);
    std::vector<HeteroGraph> graphs;
    std::vector<std::size_t> rows;
    graphs.reserve(m);
    for (std::size_t k = 0; k < m; ++k) {
        const PowerFlowSolution* w = warm && (*warm)[k].converged ? &(*warm)[k] : nullptr;
        out.solutions[k] = solve_power_flow(*net_, scenario.samples[k], w);
        if (!out.solutions[k].converged) continue;
        out.values.pf[k] = pf_value(out.solutions[k], *net_);
        graphs.push_back(build_graph(surrogate_->tpl, *net_, scenario.samples[k], out.solutions[k], scenario.contingency,
                                     surrogate_->stats));
        rows.push_back(k);
    }
    auto state = std::make_shared<StateArray>(Matrix::Zero(static_cast<Eigen::Index>(m),
                                                           static_cast<Eigen::Index>(surrogate_->state_width())));
    if (!graphs.empty()) {
        std::vector<const HeteroGraph*> ptrs;
        for (const auto& g : graphs) ptrs.push_back(&g);
        Matrix embedded;
        const auto curves = engine_.curves(ptrs, SimConfig{}.dt_out, &embedded);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out.values.tsi[rows[i]] = tsi(curves[i]);
            state->row(static_cast<Eigen::Index>(rows[i])) = embedded.row(static_cast<Eigen::Index>(i));
        }
    }
    out.state = std::move(state);
    out.cumulative_action.assign(net_->adjustable().size(), 0.0);
    out.scenario = std::move(scenario);
    return out;
}

StepOutcome RedispatchEnv::step(const EnvState& state, const std::vector<double>& action_mw)
{
    if (action_mw.size() != net_->adjustable().size()) throw ShapeError("action length differs from the adjustable machines");
    std::vector<double> a(action_mw.size());
    for (std::size_t g = 0; g < a.size(); ++g) a[g] = std::clamp(action_mw[g], -action_limit_, action_limit_);
    ScenarioDistribution next = state.scenario;
    next.base = apply_redispatch(*net_, next.base, a);
    for (auto& s : next.samples) s = apply_redispatch(*net_, s, a);
    StepOutcome out;
    out.next = observe(std::move(next), &state.solutions);
    out.next.cumulative_action = state.cumulative_action;
    for (std::size_t g = 0; g < a.size(); ++g) out.next.cumulative_action[g] += a[g];
    out.rewards = step_rewards(state.values, out.next.values);
    return out;
}

double RedispatchEnv::predicted_tsi(const OperatingState& state, const Contingency& contingency)
{
    const PowerFlowSolution sol = solve_power_flow(*net_, state);
    if (!sol.converged) return kNaN;
    const HeteroGraph g = build_graph(surrogate_->tpl, *net_, state, sol, contingency, surrogate_->stats);
    return tsi(engine_.curves({&g}, SimConfig{}.dt_out).front());
}

double redispatch_cost(const NetworkCase& net, const std::vector<double>& action_mw)
{
    const std::vector<double> c = adjustable_costs(net);
    if (action_mw.size() != c.size()) throw ShapeError("action length differs from the adjustable machines");
    double cost = 0.0;
    for (std::size_t g = 0; g < c.size(); ++g) cost += c[g] * std::abs(action_mw[g]);
    return cost;
}

std::vector<double> adjustable_costs(const NetworkCase& net)
{
    std::vector<double> c;
    for (std::size_t g : net.adjustable()) c.push_back(net.generators[g].cost);
    return c;
}

ScenarioDistribution sample_training_scenario(const NetworkCase& net, RedispatchEnv& env, const ScenarioSpec& spec,
                                              Rng& rng)
{
    std::vector<double> levels, hard_levels;
    for (double l : stress_levels()) {
        if (l >= spec.level_min - 1e-9 && l <= spec.level_max + 1e-9) levels.push_back(l);
        if (l >= spec.hard_level_min - 1e-9 && l <= spec.level_max + 1e-9) hard_levels.push_back(l);
    }
    if (levels.empty()) throw std::invalid_argument("scenario level range holds no stress level");
    const std::vector<int> lines = net.faultable_lines();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto pick = [&](const auto& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
    const bool hard = !hard_levels.empty() && u(rng) < spec.hard_fraction;
    const auto& pool = hard ? hard_levels : levels;
    double level = pick(pool);
    OperatingState base = sample_base_state(net, level, rng);
    Contingency c{pick(lines), 0.5, 0.1};
    for (std::size_t attempt = 1; hard && attempt < spec.hard_attempts; ++attempt) {
        if (env.predicted_tsi(base, c) < 0.0) break;
        level = pick(pool);
        base = sample_base_state(net, level, rng);
        c = Contingency{pick(lines), 0.5, 0.1};
    }
    ScenarioDistribution s = sample_scenario(net, base, c, spec.samples, rng);
    s.level = level;
    return s;
}

}  // namespace gd2rl
