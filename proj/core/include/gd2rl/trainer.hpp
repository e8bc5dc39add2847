#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "gd2rl/environment.hpp"

namespace gd2rl {

struct TrainConfig {
    std::size_t M = 64;  // minibatch
    std::size_t n = 10;  // parallel workers
    double epsilon = 0.001;
    std::size_t E = 10000;  // episodes
    std::size_t R = 500;    // random warm-up episodes
    std::size_t T = 5;      // steps per episode
    double gamma = 0.99;
    double lr = 0.001;
    double mu = 0.1;
    std::size_t samples = 50;  // m, deterministic samples per scenario
    double noise_sigma = 5.0;  // MW
    double noise_decay = 0.999;
    std::size_t updates_per_episode = 1;
    std::size_t checkpoint_every = 100;
    std::size_t validation_scenarios = 50;
    std::size_t buffer_capacity = 50000;
    double hard_fraction = 0.5;
    double cost_base = 100.0;  // $ per objective unit (per-unit MW)
    CriticKind critic = CriticKind::Distributional;
    std::uint64_t seed = 1;

    /// E = 600, R = 50, n = 4, m = 50, more learner updates per episode.
    static TrainConfig desk();

    void validate() const;
    /// Sets one field from its text form; throws std::invalid_argument on an
    /// unknown key or malformed value.
    void set(const std::string& key, const std::string& value);
    /// key = value lines, '#' comments.
    static TrainConfig parse(const std::string& text, TrainConfig base);
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::string& path, TrainConfig base);
    static TrainConfig load(const std::string& path);
    std::string format() const;

    ScenarioSpec scenario_spec() const;
    AgentConfig agent_config() const;
};

/// Episode objective: stable mass of the final TSI samples (diverged count as
/// unstable) + mean final v^PF - mu * sum_g c_g |a_g| / cost_base.
double episode_objective(const EnvState& final_state, const std::vector<double>& cumulative_action,
                         const std::vector<double>& costs, double mu, double cost_base);

struct EpisodeLog {
    std::size_t episode = 0;
    double mean_return = 0.0;  // over the n worker episodes
    double critic_loss = 0.0;  // NaN before learning starts
    double actor_loss = 0.0;
    std::size_t buffer = 0;
    double validation = 0.0;  // NaN except at checkpoints
    double wall_seconds = 0.0;
};

/// Deterministic part of the log line (no wall time).
std::string format_episode(const EpisodeLog& e);

struct RolloutResult {
    EnvState initial;
    EnvState final;
    std::vector<std::vector<double>> actions;  // per step, MW
    double objective = 0.0;
};

/// T-step rollout of the actor (no noise).
RolloutResult rollout(RedispatchEnv& env, AgentNets& nets, const ScenarioDistribution& scenario, std::size_t T,
                      const std::vector<double>& costs, double mu, double cost_base);

/// Seeded pool of scenarios; hard_fraction of them drawn by the hard rule.
std::vector<ScenarioDistribution> scenario_pool(const NetworkCase& net, RedispatchEnv& env, const ScenarioSpec& spec,
                                                std::size_t count, std::uint64_t seed);

struct TrainingState {
    AgentNets online;
    AgentNets target;
    std::size_t episode = 0;  // episodes completed
    std::uint64_t learner_steps = 0;
    double best_validation = -1e300;
    std::size_t best_episode = 0;
};

struct TrainResult {
    AgentNets best;
    AgentNets last;
    std::vector<EpisodeLog> log;
    std::size_t best_episode = 0;
    double best_validation = 0.0;
};

struct TrainCallbacks {
    std::function<void(const EpisodeLog&)> on_episode;
    /// Called at every checkpoint with the state and whether it is the best so far.
    std::function<void(const TrainingState&, bool best)> on_checkpoint;
};

/// Algorithm of parallel exploration workers and one learner. Reproducible
/// for a fixed config (seed, n) regardless of thread timing.
TrainResult run_training(const NetworkCase& net, const SurrogateModel& surrogate, const TrainConfig& config,
                         const TrainCallbacks& callbacks = {}, const TrainingState* resume = nullptr);

/// Checkpoint directory: config.txt, online.arrays, target.arrays, state.txt.
void save_checkpoint(const std::string& dir, const TrainingState& state, const TrainConfig& config);
TrainingState load_checkpoint(const std::string& dir, const TrainConfig& config);
/// Online nets only (for inference), from a checkpoint or a best/ directory.
AgentNets load_agent(const std::string& dir, const AgentConfig& config);
void save_agent(const std::string& dir, const AgentNets& nets);

}  // namespace gd2rl
