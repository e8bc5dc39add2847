#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <mutex>
#include <vector>

#include "gd2rl/autograd.hpp"

namespace gd2rl {

/// Support of every TSI distribution: 51 atoms z_i = -1 + 0.04 i.
inline constexpr std::size_t kAtoms = 51;
inline constexpr double kAtomMin = -1.0;
inline constexpr double kAtomMax = 1.0;
inline constexpr double kAtomDelta = (kAtomMax - kAtomMin) / static_cast<double>(kAtoms - 1);
inline constexpr double kKlFloor = 1e-12;

inline double atom(std::size_t i) { return kAtomMin + static_cast<double>(i) * kAtomDelta; }

struct CategoricalTsiDistribution {
    std::array<double, kAtoms> probs{};

    double mean() const;
    double total() const;
    bool normalized(double tol = 1e-9) const;
};

/// Adds `weight` at clip(value, -1, 1), split linearly between the two
/// neighbouring atoms. Exact atom hits get the full weight.
void two_hot_add(CategoricalTsiDistribution& dist, double value, double weight);

/// Two-hot histogram of the values with weight 1/count each. NaN entries
/// (samples excluded from TSI statistics) are skipped; throws
/// std::invalid_argument when nothing remains or a value lies outside [-1, 1].
CategoricalTsiDistribution empirical_tsi_distribution(const std::vector<double>& values);

/// Per-sample values of one state: v^PF and v^TS. A NaN TSI marks a sample
/// whose power flow diverged.
struct SampleValues {
    std::vector<double> pf;
    std::vector<double> tsi;
};

struct StepRewards {
    double pf = 0.0;          // mean v^PF difference
    std::vector<double> tsi;  // per sample v^TS difference, NaN if either side is NaN
};

StepRewards step_rewards(const SampleValues& prev, const SampleValues& next);

/// Mixture over the valid rewards r_k of the two-hot projection of
/// clip(r_k + gamma z_j) weighted by next.probs[j]; terminal transitions
/// project clip(r_k) alone. Throws std::invalid_argument without a valid reward.
CategoricalTsiDistribution categorical_target(const std::vector<double>& tsi_rewards,
                                              const CategoricalTsiDistribution& next, double gamma, bool terminal);

/// m x state width embeddings, one row per deterministic sample.
using StateArray = Matrix;

struct Transition {
    std::shared_ptr<const StateArray> state;
    std::vector<double> action;  // MW
    double pf_reward = 0.0;
    std::vector<double> tsi_rewards;  // aligned with the state rows
    std::shared_ptr<const StateArray> next_state;
    bool terminal = false;
    double priority = 0.0;  // return of the episode the transition belongs to

    bool has_tsi_reward() const;
};

enum class CriticKind {
    Distributional,  // pf value + 51 softmax probabilities
    Scalar,          // pf value + expected TSI (ablation)
};

struct AgentConfig {
    std::size_t state_width = 60;
    std::size_t conv1 = 64;
    std::size_t conv2 = 64;
    std::size_t hidden1 = 500;
    std::size_t hidden2 = 500;
    std::size_t actions = 9;
    double action_limit = 50.0;  // MW per step
    CriticKind critic = CriticKind::Distributional;

    void validate() const;
    std::size_t critic_outputs() const { return critic == CriticKind::Distributional ? kAtoms + 1 : 2; }
};

/// Shared kernel-1 convolutional front-end with mean/std pooling over the
/// sample axis, actor and critic task nets. Parameter names:
///   conv: l{1,2}/{w,b}; actor, critic: l{1,2,3}/{w,b}
struct AgentNets {
    AgentConfig config;
    ParameterSet conv;
    ParameterSet actor;
    ParameterSet critic;

    static AgentNets create(const AgentConfig& config, Rng& rng);

    std::size_t feature_width() const { return 2 * config.conv2; }
    void copy_values_from(const AgentNets& other);
    /// this <- eps * online + (1 - eps) * this, for every set.
    void soft_update_from(const AgentNets& online, double eps);
    void zero_grad();
};

/// Pooled features of `states`, (batch * m) x width with m rows per state.
Var conv_features(Tape& t, AgentNets& nets, Var states, Eigen::Index m);

/// Action in MW, tanh-bounded to +-action_limit. batch x actions.
Var actor_forward(Tape& t, AgentNets& nets, Var features);

struct CriticVars {
    Var pf;        // batch x 1
    Var logits;    // batch x 51 (distributional) or batch x 1 expected TSI (scalar)
    Var expected;  // batch x 1 expected TSI
};

/// The action enters scaled by 1 / action_limit.
CriticVars critic_forward(Tape& t, AgentNets& nets, Var features, Var action_mw);

struct CriticOutput {
    double pf_value = 0.0;
    double expected_tsi = 0.0;
    CategoricalTsiDistribution tsi;  // distributional critic only
};

/// Tape-free helpers on one state array.
std::vector<double> act(AgentNets& nets, const StateArray& state);
CriticOutput evaluate_critic(AgentNets& nets, const StateArray& state, const std::vector<double>& action_mw);

/// Stacks equally sized state arrays.
Matrix stack_states(const std::vector<const StateArray*>& states);

struct LossTerms {
    Var total;
    double tsi = 0.0;  // KL (distributional) or squared error (scalar)
    double pf = 0.0;
};

/// KL(target || critic) with probabilities floored at 1e-12 plus the squared
/// pf Bellman error; targets come from the target nets. Transitions without
/// a valid TSI reward contribute only to the pf term.
LossTerms critic_loss(Tape& t, AgentNets& nets, AgentNets& target, const std::vector<const Transition*>& batch,
                      double gamma);

/// mu * mean(sum_g c_g |a_g| / cost_base) - mean(E[Z^TS] + Z^PF). Features are
/// detached: the shared front-end learns through the critic only.
Var actor_loss(Tape& t, AgentNets& nets, const std::vector<const Transition*>& batch, const std::vector<double>& cost,
               double mu, double cost_base);

/// Ring buffer of transitions with serialized access.
class ReplayBuffer {
public:
    enum class Mode { Uniform, Importance };

    explicit ReplayBuffer(std::size_t capacity = 50000);

    void push(Transition t);
    std::size_t size() const;
    std::size_t capacity() const { return capacity_; }

    /// M draws with replacement. Uniform: equal probability. Importance:
    /// rank by priority ascending (worst = 1, ties by age) with weight 1/rank.
    /// Throws std::invalid_argument when M exceeds the stored count.
    std::vector<std::shared_ptr<const Transition>> sample(std::size_t M, Mode mode, Rng& rng) const;

    /// Normalized sampling probability of every stored transition, storage order.
    std::vector<double> probabilities(Mode mode) const;

private:
    std::vector<double> probabilities_locked(Mode mode) const;

    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<std::shared_ptr<const Transition>> items_;
    mutable std::mutex mutex_;
};

/// Even learner steps sample uniformly, odd steps by importance.
inline ReplayBuffer::Mode sampling_mode(std::uint64_t learner_step)
{
    return learner_step % 2 == 0 ? ReplayBuffer::Mode::Uniform : ReplayBuffer::Mode::Importance;
}

std::vector<std::shared_ptr<const Transition>> mixed_sample(const ReplayBuffer& buffer, std::size_t M,
                                                            std::uint64_t learner_step, Rng& rng);

}  // namespace gd2rl
