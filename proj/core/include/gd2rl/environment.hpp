#pragma once

#include <memory>
#include <vector>

#include "gd2rl/distrl.hpp"
#include "gd2rl/power_flow.hpp"
#include "gd2rl/surrogate.hpp"

namespace gd2rl {

/// One distributional state as seen by the agent.
struct EnvState {
    ScenarioDistribution scenario;
    std::vector<PowerFlowSolution> solutions;  // per sample
    SampleValues values;                        // v^PF, v^TS (NaN when diverged)
    std::shared_ptr<const StateArray> state;    // m x 60, zero rows when diverged
    std::vector<double> cumulative_action;      // MW applied since the episode start

    std::size_t samples() const { return scenario.samples.size(); }
    std::size_t diverged() const;
    /// Fraction of samples with TSI > 0; diverged samples count as unstable.
    double stable_fraction() const;
    /// Mean TSI over the converged samples (NaN if none).
    double mean_tsi() const;
    double mean_pf() const;
};

struct StepOutcome {
    EnvState next;
    StepRewards rewards;
};

/// Power flow plus surrogate environment. Not thread-safe: each worker owns one.
class RedispatchEnv {
public:
    RedispatchEnv(const NetworkCase& net, const SurrogateModel& surrogate, Precision precision = Precision::Single);

    /// Solves every sample, embeds and predicts its curves.
    EnvState observe(ScenarioDistribution scenario, const std::vector<PowerFlowSolution>* warm = nullptr);

    /// Applies the action (clipped to +-limit) to every sample and observes.
    StepOutcome step(const EnvState& state, const std::vector<double>& action_mw);

    /// Surrogate TSI of one state; NaN when its power flow diverges.
    double predicted_tsi(const OperatingState& state, const Contingency& contingency);

    const NetworkCase& network() const { return *net_; }
    double action_limit() const { return action_limit_; }
    void set_action_limit(double mw) { action_limit_ = mw; }

private:
    const NetworkCase* net_;
    const SurrogateModel* surrogate_;
    SurrogateInference engine_;
    double action_limit_ = 50.0;
};

/// Redispatch cost sum_g c_g |a_g| over the adjustable machines, $.
double redispatch_cost(const NetworkCase& net, const std::vector<double>& action_mw);

/// Cost vector of the adjustable machines, $/MW.
std::vector<double> adjustable_costs(const NetworkCase& net);

struct ScenarioSpec {
    std::size_t samples = 50;
    double level_min = 0.8;
    double level_max = 1.2;
    /// Share of scenarios drawn from the stressed band and kept only if the
    /// base state is predicted unstable.
    double hard_fraction = 0.5;
    double hard_level_min = 1.1;
    std::size_t hard_attempts = 20;
};

/// Draws a uniform stress level from the nine-level grid within
/// [level_min, level_max] and a uniform faultable contingency. Hard draws
/// retry with the surrogate until the base state's predicted TSI is negative
/// (or the attempts run out). Deterministic given the rng.
ScenarioDistribution sample_training_scenario(const NetworkCase& net, RedispatchEnv& env, const ScenarioSpec& spec,
                                              Rng& rng);

}  // namespace gd2rl
