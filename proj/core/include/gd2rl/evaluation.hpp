#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gd2rl/trainer.hpp"
#include "gd2rl/transient.hpp"

namespace gd2rl {

/// True-simulator TSI of every sample after adding `action_mw` (NaN when the
/// power flow diverges).
std::vector<double> true_tsi(const NetworkCase& net, const ScenarioDistribution& scenario,
                             const std::vector<double>& action_mw);

/// Share of samples with TSI > 0; NaN (diverged) counts as unstable.
double stable_share(const std::vector<double>& tsi);

/// Empirical two-hot histogram of the converged samples; all mass at -1 when
/// every sample diverged.
CategoricalTsiDistribution tsi_histogram(const std::vector<double>& tsi);

/// Distribution of clip(x + y) for independent x ~ pre, y ~ change, projected
/// on the atoms.
CategoricalTsiDistribution shift_distribution(const CategoricalTsiDistribution& pre,
                                              const CategoricalTsiDistribution& change);

/// Seeded scenarios at stress levels >= min_level whose base state is unstable
/// under the true simulator for its contingency.
std::vector<ScenarioDistribution> hard_pool(const NetworkCase& net, std::size_t count, std::size_t samples,
                                            std::uint64_t seed, double min_level = 1.1,
                                            std::size_t max_draws = 100000);

/// Seeded scenarios drawn uniformly over the stress levels and contingencies.
std::vector<ScenarioDistribution> mixed_pool(const NetworkCase& net, std::size_t count, std::size_t samples,
                                             std::uint64_t seed);

struct ScenarioReport {
    std::size_t index = 0;
    double level = 0.0;
    int fault = 0;
    double pre_confidence = 0.0;   // %, true simulator
    double post_confidence = 0.0;  // %, true simulator
    double surrogate_pre = 0.0;    // %, environment view
    double surrogate_post = 0.0;
    double cost = 0.0;  // $
    std::vector<double> action;  // final action sum_t a_t, MW
    CategoricalTsiDistribution pre_hist;
    CategoricalTsiDistribution critic_hist;  // empty (all zero) for the scalar critic
    CategoricalTsiDistribution post_hist;
    double agent_seconds = 0.0;  // policy rollout only
};

struct FaultRow {
    int fault = 0;
    std::size_t scenarios = 0;
    double pre_confidence = 0.0;
    double post_confidence = 0.0;
    double cost = 0.0;
};

struct EvaluationReport {
    std::string policy;
    std::vector<ScenarioReport> scenarios;

    double mean_pre() const;
    double mean_post() const;
    double mean_cost() const;
    std::vector<FaultRow> per_fault() const;
};

enum class PolicyKind { Agent, Zero, Random };

struct EvaluationOptions {
    PolicyKind policy = PolicyKind::Agent;
    std::size_t T = 5;
    std::uint64_t seed = 1;  // random policy only
    std::size_t threads = 1;
};

/// Rolls the policy out on the surrogate environment for every scenario and
/// validates the final action sum_t a_t on every sample with the true
/// simulator. `nets` may be null for the zero and random policies.
EvaluationReport evaluate_policy(const NetworkCase& net, const SurrogateModel& surrogate, const AgentNets* nets,
                                 const std::vector<ScenarioDistribution>& pool, const EvaluationOptions& options);

struct PsoConfig {
    std::size_t particles = 30;
    std::size_t iterations = 50;
    double inertia = 0.72;
    double cognitive = 1.49;
    double social = 1.49;
    double bound = 250.0;  // per dimension, symmetric
    double velocity_fraction = 0.2;  // of the range 2 * bound

    void validate() const;
};

struct PsoResult {
    std::vector<double> best;
    double best_value = 0.0;  // maximized objective
    std::size_t evaluations = 0;
    std::vector<double> history;  // global best after each iteration
};

/// Global-best PSO maximizing `objective` over [-bound, bound]^dim.
PsoResult pso_maximize(const std::function<double(const std::vector<double>&)>& objective, std::size_t dim,
                       const PsoConfig& config, Rng& rng);

enum class FitnessBackend { TrueSim, Surrogate };

struct PsoRedispatch {
    PsoResult search;
    double cost = 0.0;
    double confidence = 0.0;  // %, true simulator at the best action
    double seconds = 0.0;
};

/// PSO over the 9-dimensional cumulative action; fitness is the episode
/// objective of the action applied to every sample.
PsoRedispatch pso_redispatch(const NetworkCase& net, const SurrogateModel* surrogate, const ScenarioDistribution& scenario,
                             FitnessBackend backend, const PsoConfig& config, double mu, double cost_base, Rng& rng);

struct ComparisonRow {
    std::string method;  // distrl | scalar
    std::size_t budget = 0;  // deterministic samples per training scenario
    std::uint64_t seed = 0;
    double confidence = 0.0;  // %, true simulator on the evaluation pool
    double cost = 0.0;
    double train_seconds = 0.0;
};

/// Trains both critics for every (budget, seed) and evaluates them on `pool`.
std::vector<ComparisonRow> compare_rl(const NetworkCase& net, const SurrogateModel& surrogate, const TrainConfig& base,
                                      const std::vector<std::size_t>& budgets, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<ScenarioDistribution>& pool,
                                      const std::function<void(const ComparisonRow&)>& on_row = {});

/// Running maximum over increasing budgets, per method and seed average.
std::vector<std::pair<std::size_t, double>> monotone_curve(const std::vector<ComparisonRow>& rows,
                                                           const std::string& method);

// Plot-ready text files: one header row, whitespace-separated columns.
std::string format_histograms(const ScenarioReport& r);
std::string format_report(const EvaluationReport& report);
std::string format_fault_table(const EvaluationReport& report);
std::string format_comparison(const std::vector<ComparisonRow>& rows);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;
    double number(std::size_t row, const std::string& name) const;
};
/// Parses any file produced above ('#' lines are comments).
Table parse_table(const std::string& text);
std::vector<ComparisonRow> parse_comparison(const std::string& text);

}  // namespace gd2rl
