#include "gd2rl/grid.hpp"

#include <algorithm>
#include <cmath>

namespace gd2rl {

namespace {

double perturb(double spread, Rng& rng)
{
    if (spread <= 0.0) return 1.0;
    std::uniform_real_distribution<double> u(-spread, spread);
    return 1.0 + u(rng);
}

double draw_pv(const PvRecord& pv, double mean, Rng& rng)
{
    if (pv.sigma <= 0.0) return std::clamp(mean, 0.0, pv.p_cap);
    if (pv.distribution == PvDistribution::Uniform) {
        std::uniform_real_distribution<double> u(mean - pv.sigma, mean + pv.sigma);
        return std::clamp(u(rng), 0.0, pv.p_cap);
    }
    std::normal_distribution<double> normal(mean, pv.sigma);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double v = normal(rng);
        if (v >= 0.0 && v <= pv.p_cap) return v;
    }
    // The mean sits many sigmas outside the support; fall back to the nearest bound.
    return std::clamp(mean, 0.0, pv.p_cap);
}

}  // namespace

std::vector<double> stress_levels()
{
    std::vector<double> levels;
    for (int k = 0; k < 9; ++k) levels.push_back(0.80 + 0.05 * k);
    return levels;
}

void rebalance_adjustable(const NetworkCase& net, OperatingState& state, double change_mw)
{
    const auto& adj = net.adjustable();
    double total = 0.0;
    for (auto g : adj) total += state.gen_p[g];
    double absorbed = 0.0;
    for (auto g : adj) {
        const double share = total > 0.0 ? state.gen_p[g] / total : 1.0 / static_cast<double>(adj.size());
        const double before = state.gen_p[g];
        const auto& rec = net.generators[g];
        state.gen_p[g] = std::clamp(before + change_mw * share, rec.p_min, rec.p_max);
        absorbed += state.gen_p[g] - before;
    }
    state.gen_p[net.slack_generator()] += change_mw - absorbed;
}

OperatingState sample_base_state(const NetworkCase& net, double level, Rng& rng, const BaseStateOptions& options)
{
    OperatingState s = nominal_state(net);
    for (std::size_t i = 0; i < s.load_p.size(); ++i) {
        const double f = level * perturb(options.load_spread, rng);
        s.load_p[i] *= f;
        s.load_q[i] *= f;
    }
    for (std::size_t g = 0; g < s.gen_p.size(); ++g) {
        const auto& rec = net.generators[g];
        double p = rec.p_out * level * perturb(options.gen_spread, rng);
        if (rec.adjustable) p = std::clamp(p, rec.p_min, rec.p_max);
        s.gen_p[g] = p;
        s.gen_v[g] *= perturb(options.voltage_spread, rng);
    }
    for (std::size_t k = 0; k < s.pv_p.size(); ++k) {
        const auto& pv = net.pv_units[k];
        s.pv_p[k] = std::clamp(pv.p_mean * level * perturb(options.gen_spread, rng), 0.0, pv.p_cap);
    }

    double load = 0.0;
    for (double p : s.load_p) load += p;
    double fixed = s.gen_p[net.slack_generator()];
    for (double p : s.pv_p) fixed += p;
    for (std::size_t g = 0; g < s.gen_p.size(); ++g)
        if (!net.generators[g].adjustable && g != net.slack_generator()) fixed += s.gen_p[g];
    double adjustable = 0.0;
    for (auto g : net.adjustable()) adjustable += s.gen_p[g];

    const double target = (1.0 + options.loss_allowance) * load - fixed;
    rebalance_adjustable(net, s, target - adjustable);
    return s;
}

ScenarioDistribution sample_scenario(const NetworkCase& net, const OperatingState& base,
                                     const Contingency& contingency, std::size_t m, Rng& rng)
{
    if (m == 0) throw ValidationError("scenario needs at least one sample");
    ScenarioDistribution scenario;
    scenario.base = base;
    scenario.contingency = contingency;
    scenario.samples.reserve(m);
    for (std::size_t k = 0; k < m; ++k) {
        OperatingState s = base;
        double delta = 0.0;
        for (std::size_t u = 0; u < s.pv_p.size(); ++u) {
            s.pv_p[u] = draw_pv(net.pv_units[u], base.pv_p[u], rng);
            delta += s.pv_p[u] - base.pv_p[u];
        }
        rebalance_adjustable(net, s, -delta);
        scenario.samples.push_back(std::move(s));
    }
    return scenario;
}

OperatingState apply_redispatch(const NetworkCase& net, const OperatingState& state,
                                const std::vector<double>& action_mw)
{
    const auto& adj = net.adjustable();
    if (action_mw.size() != adj.size())
        throw ValidationError("action has " + std::to_string(action_mw.size()) + " entries, case has " +
                              std::to_string(adj.size()) + " adjustable generators");
    OperatingState out = state;
    for (std::size_t k = 0; k < adj.size(); ++k) {
        const auto& rec = net.generators[adj[k]];
        out.gen_p[adj[k]] = std::clamp(out.gen_p[adj[k]] + action_mw[k], rec.p_min, rec.p_max);
    }
    return out;
}

}  // namespace gd2rl
