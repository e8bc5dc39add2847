#include "gd2rl/distrl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gd2rl {

namespace {

void add_dense(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
{
    ps.add_glorot(prefix + "w", static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), rng);
    ps.add(prefix + "b", 1, static_cast<Eigen::Index>(out));
}

/// Output layer drawn from U(-3e-3, 3e-3) so that the initial actions and
/// values sit near zero.
void add_output(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
{
    Parameter& w = ps.add(prefix + "w", static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    std::uniform_real_distribution<double> u(-3e-3, 3e-3);
    for (Eigen::Index k = 0; k < w.value.size(); ++k) w.value.data()[k] = u(rng);
    ps.add(prefix + "b", 1, static_cast<Eigen::Index>(out));
}

Var dense(Tape& t, ParameterSet& ps, const std::string& prefix, Var x)
{
    return ag::linear(x, t.parameter(ps.at(prefix + "w")), t.parameter(ps.at(prefix + "b")));
}

Var task_net(Tape& t, ParameterSet& ps, Var x)
{
    Var h = ag::relu(dense(t, ps, "l1/", x));
    h = ag::relu(dense(t, ps, "l2/", h));
    return dense(t, ps, "l3/", h);
}

Matrix atom_column()
{
    Matrix z(static_cast<Eigen::Index>(kAtoms), 1);
    for (std::size_t i = 0; i < kAtoms; ++i) z(static_cast<Eigen::Index>(i), 0) = atom(i);
    return z;
}

Eigen::Index rows_per_state(const std::vector<const Transition*>& batch)
{
    if (batch.empty()) throw std::invalid_argument("empty transition batch");
    const Eigen::Index m = batch.front()->state->rows();
    for (const Transition* tr : batch)
        if (tr->state->rows() != m || tr->next_state->rows() != m)
            throw ShapeError("transition batch mixes state arrays with different sample counts");
    return m;
}

Matrix batch_states(const std::vector<const Transition*>& batch, bool next)
{
    std::vector<const StateArray*> s;
    s.reserve(batch.size());
    for (const Transition* tr : batch) s.push_back(next ? tr->next_state.get() : tr->state.get());
    return stack_states(s);
}

Matrix batch_actions(const std::vector<const Transition*>& batch, std::size_t actions)
{
    Matrix a(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(actions));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i]->action.size() != actions) throw ShapeError("transition action has the wrong length");
        for (std::size_t g = 0; g < actions; ++g)
            a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) = batch[i]->action[g];
    }
    return a;
}

double mean_valid(const std::vector<double>& v)
{
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (!std::isnan(x)) {
            s += x;
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace

double CategoricalTsiDistribution::mean() const
{
    double s = 0.0;
    for (std::size_t i = 0; i < kAtoms; ++i) s += probs[i] * atom(i);
    return s;
}

double CategoricalTsiDistribution::total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

bool CategoricalTsiDistribution::normalized(double tol) const
{
    return std::all_of(probs.begin(), probs.end(), [](double p) { return p >= 0.0; }) && std::abs(total() - 1.0) <= tol;
}

void two_hot_add(CategoricalTsiDistribution& dist, double value, double weight)
{
    const double pos = (std::clamp(value, kAtomMin, kAtomMax) - kAtomMin) / kAtomDelta;
    auto lo = static_cast<std::size_t>(std::floor(pos));
    double frac = pos - static_cast<double>(lo);
    // Snap rounding residue so exact atom hits keep their full mass.
    if (frac < 1e-12) frac = 0.0;
    if (frac > 1.0 - 1e-12) {
        ++lo;
        frac = 0.0;
    }
    if (lo >= kAtoms - 1) {
        dist.probs[kAtoms - 1] += weight;
        return;
    }
    dist.probs[lo] += weight * (1.0 - frac);
    if (frac > 0.0) dist.probs[lo + 1] += weight * frac;
}

CategoricalTsiDistribution empirical_tsi_distribution(const std::vector<double>& values)
{
    std::size_t n = 0;
    for (double v : values) {
        if (std::isnan(v)) continue;
        if (v < kAtomMin - 1e-12 || v > kAtomMax + 1e-12)
            throw std::invalid_argument("TSI value " + std::to_string(v) + " outside [-1, 1]");
        ++n;
    }
    if (n == 0) throw std::invalid_argument("empirical TSI distribution of no valid samples");
    CategoricalTsiDistribution d;
    const double w = 1.0 / static_cast<double>(n);
    for (double v : values)
        if (!std::isnan(v)) two_hot_add(d, v, w);
    return d;
}

StepRewards step_rewards(const SampleValues& prev, const SampleValues& next)
{
    const std::size_t m = prev.pf.size();
    if (prev.tsi.size() != m || next.pf.size() != m || next.tsi.size() != m || m == 0)
        throw std::invalid_argument("step_rewards: sample counts differ or are zero");
    StepRewards r;
    r.pf = (std::accumulate(next.pf.begin(), next.pf.end(), 0.0) - std::accumulate(prev.pf.begin(), prev.pf.end(), 0.0)) /
           static_cast<double>(m);
    r.tsi.resize(m);
    for (std::size_t k = 0; k < m; ++k) r.tsi[k] = next.tsi[k] - prev.tsi[k];  // NaN propagates
    return r;
}

CategoricalTsiDistribution categorical_target(const std::vector<double>& tsi_rewards,
                                              const CategoricalTsiDistribution& next, double gamma, bool terminal)
{
    const auto valid = static_cast<std::size_t>(
        std::count_if(tsi_rewards.begin(), tsi_rewards.end(), [](double r) { return !std::isnan(r); }));
    if (valid == 0) throw std::invalid_argument("categorical_target without a valid TSI reward");
    const double w = 1.0 / static_cast<double>(valid);
    CategoricalTsiDistribution out;
    for (double r : tsi_rewards) {
        if (std::isnan(r)) continue;
        if (terminal) {
            two_hot_add(out, r, w);
            continue;
        }
        for (std::size_t j = 0; j < kAtoms; ++j)
            if (next.probs[j] > 0.0) two_hot_add(out, r + gamma * atom(j), w * next.probs[j]);
    }
    return out;
}

bool Transition::has_tsi_reward() const
{
    return std::any_of(tsi_rewards.begin(), tsi_rewards.end(), [](double r) { return !std::isnan(r); });
}

void AgentConfig::validate() const
{
    if (state_width == 0 || conv1 == 0 || conv2 == 0 || hidden1 == 0 || hidden2 == 0 || actions == 0)
        throw std::invalid_argument("agent layer widths must be positive");
    if (!(action_limit > 0.0)) throw std::invalid_argument("action limit must be positive");
}

AgentNets AgentNets::create(const AgentConfig& config, Rng& rng)
{
    config.validate();
    AgentNets n;
    n.config = config;
    add_dense(n.conv, "l1/", config.state_width, config.conv1, rng);
    add_dense(n.conv, "l2/", config.conv1, config.conv2, rng);
    const std::size_t f = 2 * config.conv2;
    add_dense(n.actor, "l1/", f, config.hidden1, rng);
    add_dense(n.actor, "l2/", config.hidden1, config.hidden2, rng);
    add_output(n.actor, "l3/", config.hidden2, config.actions, rng);
    add_dense(n.critic, "l1/", f + config.actions, config.hidden1, rng);
    add_dense(n.critic, "l2/", config.hidden1, config.hidden2, rng);
    add_output(n.critic, "l3/", config.hidden2, config.critic_outputs(), rng);
    return n;
}

void AgentNets::copy_values_from(const AgentNets& other)
{
    conv.copy_values_from(other.conv);
    actor.copy_values_from(other.actor);
    critic.copy_values_from(other.critic);
}

void AgentNets::soft_update_from(const AgentNets& online, double eps)
{
    conv.soft_update_from(online.conv, eps);
    actor.soft_update_from(online.actor, eps);
    critic.soft_update_from(online.critic, eps);
}

void AgentNets::zero_grad()
{
    conv.zero_grad();
    actor.zero_grad();
    critic.zero_grad();
}

Var conv_features(Tape& t, AgentNets& nets, Var states, Eigen::Index m)
{
    if (states.cols() != static_cast<Eigen::Index>(nets.config.state_width))
        throw ShapeError("state array width " + std::to_string(states.cols()) + ", expected " +
                         std::to_string(nets.config.state_width));
    auto conv = [&](Var x, const std::string& p) {
        return ag::relu(ag::conv1d(x, t.parameter(nets.conv.at(p + "w")), t.parameter(nets.conv.at(p + "b")), 1, m));
    };
    const Var h = conv(conv(states, "l1/"), "l2/");
    return ag::concat_cols({ag::segment_mean(h, m), ag::segment_std(h, m)});
}

Var actor_forward(Tape& t, AgentNets& nets, Var features)
{
    return ag::scale(ag::tanh(task_net(t, nets.actor, features)), nets.config.action_limit);
}

CriticVars critic_forward(Tape& t, AgentNets& nets, Var features, Var action_mw)
{
    const Var x = ag::concat_cols({features, ag::scale(action_mw, 1.0 / nets.config.action_limit)});
    const Var out = task_net(t, nets.critic, x);
    CriticVars v;
    v.pf = ag::slice_cols(out, 0, 1);
    if (nets.config.critic == CriticKind::Distributional) {
        v.logits = ag::slice_cols(out, 1, static_cast<Eigen::Index>(kAtoms));
        static const Matrix z = atom_column();
        v.expected = ag::matmul(ag::softmax_rows(v.logits), t.constant(z));
    } else {
        v.logits = ag::slice_cols(out, 1, 1);
        v.expected = v.logits;
    }
    return v;
}

std::vector<double> act(AgentNets& nets, const StateArray& state)
{
    Tape t(false);
    const Var a = actor_forward(t, nets, conv_features(t, nets, t.constant(state), state.rows()));
    return {a.value().data(), a.value().data() + a.value().size()};
}

CriticOutput evaluate_critic(AgentNets& nets, const StateArray& state, const std::vector<double>& action_mw)
{
    if (action_mw.size() != nets.config.actions) throw ShapeError("critic action has the wrong length");
    Tape t(false);
    const Var f = conv_features(t, nets, t.constant(state), state.rows());
    Matrix a(1, static_cast<Eigen::Index>(action_mw.size()));
    for (std::size_t g = 0; g < action_mw.size(); ++g) a(0, static_cast<Eigen::Index>(g)) = action_mw[g];
    const CriticVars v = critic_forward(t, nets, f, t.constant(a));
    CriticOutput out;
    out.pf_value = v.pf.scalar();
    out.expected_tsi = v.expected.scalar();
    if (nets.config.critic == CriticKind::Distributional) {
        const Var p = ag::softmax_rows(v.logits);
        for (std::size_t i = 0; i < kAtoms; ++i) out.tsi.probs[i] = p.value()(0, static_cast<Eigen::Index>(i));
    }
    return out;
}

Matrix stack_states(const std::vector<const StateArray*>& states)
{
    if (states.empty()) return {};
    const Eigen::Index m = states.front()->rows();
    const Eigen::Index w = states.front()->cols();
    Matrix out(m * static_cast<Eigen::Index>(states.size()), w);
    for (std::size_t i = 0; i < states.size(); ++i) {
        if (states[i]->rows() != m || states[i]->cols() != w) throw ShapeError("stack_states: state arrays differ in shape");
        out.middleRows(static_cast<Eigen::Index>(i) * m, m) = *states[i];
    }
    return out;
}

LossTerms critic_loss(Tape& t, AgentNets& nets, AgentNets& target, const std::vector<const Transition*>& batch,
                      double gamma)
{
    const Eigen::Index m = rows_per_state(batch);
    const auto b = static_cast<Eigen::Index>(batch.size());
    const bool dist = nets.config.critic == CriticKind::Distributional;

    // Bootstrap values from the target nets at (S', pi'(S')).
    Tape tt(false);
    const Var f_next = conv_features(tt, target, tt.constant(batch_states(batch, true)), m);
    const CriticVars next = critic_forward(tt, target, f_next, actor_forward(tt, target, f_next));
    const Matrix next_probs = dist ? ag::softmax_rows(next.logits).value() : Matrix();

    Matrix y_pf(b, 1), y_tsi(b, dist ? static_cast<Eigen::Index>(kAtoms) : 1), mask(b, 1);
    double t_log_t = 0.0;
    double valid = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const Transition& tr = *batch[static_cast<std::size_t>(i)];
        const double boot = tr.terminal ? 0.0 : gamma;
        y_pf(i, 0) = tr.pf_reward + boot * next.pf.value()(i, 0);
        mask(i, 0) = tr.has_tsi_reward() ? 1.0 : 0.0;
        valid += mask(i, 0);
        if (!dist) {
            y_tsi(i, 0) = mask(i, 0) > 0.0 ? mean_valid(tr.tsi_rewards) + boot * next.expected.value()(i, 0) : 0.0;
            continue;
        }
        y_tsi.row(i).setZero();
        if (mask(i, 0) == 0.0) continue;
        CategoricalTsiDistribution nd;
        for (std::size_t j = 0; j < kAtoms; ++j) nd.probs[j] = next_probs(i, static_cast<Eigen::Index>(j));
        const CategoricalTsiDistribution target_dist = categorical_target(tr.tsi_rewards, nd, gamma, tr.terminal);
        for (std::size_t j = 0; j < kAtoms; ++j) {
            const double p = target_dist.probs[j];
            y_tsi(i, static_cast<Eigen::Index>(j)) = p;
            if (p > 0.0) t_log_t += p * std::log(std::max(p, kKlFloor));
        }
    }

    const Var f = conv_features(t, nets, t.constant(batch_states(batch, false)), m);
    const CriticVars cv = critic_forward(t, nets, f, t.constant(batch_actions(batch, nets.config.actions)));
    const Var pf_term = ag::mean(ag::square(ag::sub(cv.pf, t.constant(y_pf))));
    Var tsi_term;
    if (valid == 0.0) {
        tsi_term = t.constant(Matrix::Zero(1, 1));
    } else if (dist) {
        const Var logp = ag::clamp(ag::log_softmax_rows(cv.logits), std::log(kKlFloor), 1.0);
        tsi_term = ag::add_scalar(ag::scale(ag::sum(ag::mul(t.constant(y_tsi), logp)), -1.0 / valid), t_log_t / valid);
    } else {
        const Var err = ag::mul(ag::sub(cv.expected, t.constant(y_tsi)), t.constant(mask));
        tsi_term = ag::scale(ag::sum(ag::square(err)), 1.0 / valid);
    }
    LossTerms out;
    out.tsi = tsi_term.scalar();
    out.pf = pf_term.scalar();
    out.total = ag::add(tsi_term, pf_term);
    return out;
}

Var actor_loss(Tape& t, AgentNets& nets, const std::vector<const Transition*>& batch, const std::vector<double>& cost,
               double mu, double cost_base)
{
    const Eigen::Index m = rows_per_state(batch);
    if (cost.size() != nets.config.actions) throw ShapeError("cost vector has the wrong length");
    const Var f = ag::detach(conv_features(t, nets, t.constant(batch_states(batch, false)), m));
    const Var a = actor_forward(t, nets, f);
    const CriticVars cv = critic_forward(t, nets, f, a);
    Matrix c(1, static_cast<Eigen::Index>(cost.size()));
    for (std::size_t g = 0; g < cost.size(); ++g) c(0, static_cast<Eigen::Index>(g)) = cost[g] / cost_base;
    const double scale = mu / static_cast<double>(batch.size());
    const Var cost_term = ag::scale(ag::sum(ag::mul(ag::abs(a), t.constant(c))), scale);
    return ag::sub(cost_term, ag::mean(ag::add(cv.expected, cv.pf)));
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity)
{
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t)
{
    auto item = std::make_shared<const Transition>(std::move(t));
    std::lock_guard<std::mutex> lock(mutex_);
    if (items_.size() < capacity_) {
        items_.push_back(std::move(item));
    } else {
        items_[next_] = std::move(item);
        next_ = (next_ + 1) % capacity_;
    }
}

std::size_t ReplayBuffer::size() const
{
    std::lock_guard<std::mutex> lock(mutex_);
    return items_.size();
}

std::vector<double> ReplayBuffer::probabilities(Mode mode) const
{
    std::lock_guard<std::mutex> lock(mutex_);
    return probabilities_locked(mode);
}

std::vector<double> ReplayBuffer::probabilities_locked(Mode mode) const
{
    const std::size_t n = items_.size();
    std::vector<double> p(n, n ? 1.0 / static_cast<double>(n) : 0.0);
    if (mode == Mode::Uniform || n == 0) return p;
    // Age order: the oldest item sits at next_ once the ring has wrapped.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = (next_ + i) % n;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return items_[a]->priority < items_[b]->priority; });
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        p[order[r]] = 1.0 / static_cast<double>(r + 1);
        total += p[order[r]];
    }
    for (double& x : p) x /= total;
    return p;
}

std::vector<std::shared_ptr<const Transition>> ReplayBuffer::sample(std::size_t M, Mode mode, Rng& rng) const
{
    std::lock_guard<std::mutex> lock(mutex_);
    const std::size_t n = items_.size();
    if (M > n)
        throw std::invalid_argument("replay buffer holds " + std::to_string(n) + " transitions, " + std::to_string(M) +
                                    " requested");
    std::vector<std::shared_ptr<const Transition>> out;
    out.reserve(M);
    if (mode == Mode::Uniform) {
        std::uniform_int_distribution<std::size_t> u(0, n - 1);
        for (std::size_t k = 0; k < M; ++k) out.push_back(items_[u(rng)]);
        return out;
    }
    const std::vector<double> p = probabilities_locked(mode);
    std::vector<double> cdf(n);
    std::partial_sum(p.begin(), p.end(), cdf.begin());
    std::uniform_real_distribution<double> u(0.0, cdf.back());
    for (std::size_t k = 0; k < M; ++k) {
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u(rng));
        out.push_back(items_[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), n - 1)]);
    }
    return out;
}

std::vector<std::shared_ptr<const Transition>> mixed_sample(const ReplayBuffer& buffer, std::size_t M,
                                                            std::uint64_t learner_step, Rng& rng)
{
    return buffer.sample(M, sampling_mode(learner_step), rng);
}

}  // namespace gd2rl
