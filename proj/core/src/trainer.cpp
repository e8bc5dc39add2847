#include "gd2rl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace gd2rl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Rng stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint32_t tag)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), tag};
    return Rng(seq);
}

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v)
{
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size()) throw std::invalid_argument("config key '" + key + "': expected a count, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v)
{
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(x))
        throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
    return x;
}

std::string fmt(double x)
{
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

std::vector<double> clipped(std::vector<double> a, double limit)
{
    for (double& x : a) x = std::clamp(x, -limit, limit);
    return a;
}

struct WorkerEpisode {
    std::vector<Transition> transitions;
    double objective = 0.0;
};

}  // namespace

TrainConfig TrainConfig::desk()
{
    TrainConfig c;
    c.E = 600;
    c.R = 50;
    c.n = 4;
    c.samples = 50;
    c.updates_per_episode = 4;
    return c;
}

void TrainConfig::validate() const
{
    if (M == 0) throw std::invalid_argument("M must be positive");
    if (n == 0) throw std::invalid_argument("n must be positive");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in (0, 1]");
    if (E == 0) throw std::invalid_argument("E must be positive");
    if (R >= E) throw std::invalid_argument("R must be smaller than E");
    if (T == 0) throw std::invalid_argument("T must be at least 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(mu >= 0.0)) throw std::invalid_argument("mu must be non-negative");
    if (samples < 2) throw std::invalid_argument("samples must be at least 2");
    if (!(noise_sigma >= 0.0) || !(noise_decay > 0.0 && noise_decay <= 1.0))
        throw std::invalid_argument("noise_sigma must be >= 0 and noise_decay in (0, 1]");
    if (updates_per_episode == 0) throw std::invalid_argument("updates_per_episode must be positive");
    if (checkpoint_every == 0) throw std::invalid_argument("checkpoint_every must be positive");
    if (validation_scenarios == 0) throw std::invalid_argument("validation_scenarios must be positive");
    if (buffer_capacity < M) throw std::invalid_argument("buffer_capacity must be at least M");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) throw std::invalid_argument("hard_fraction must lie in [0, 1]");
    if (!(cost_base > 0.0)) throw std::invalid_argument("cost_base must be positive");
}

void TrainConfig::set(const std::string& key, const std::string& value)
{
    const std::string v = trim(value);
    if (key == "M") M = to_size(key, v);
    else if (key == "n") n = to_size(key, v);
    else if (key == "epsilon") epsilon = to_double(key, v);
    else if (key == "E") E = to_size(key, v);
    else if (key == "R") R = to_size(key, v);
    else if (key == "T") T = to_size(key, v);
    else if (key == "gamma") gamma = to_double(key, v);
    else if (key == "lr") lr = to_double(key, v);
    else if (key == "mu") mu = to_double(key, v);
    else if (key == "samples") samples = to_size(key, v);
    else if (key == "noise_sigma") noise_sigma = to_double(key, v);
    else if (key == "noise_decay") noise_decay = to_double(key, v);
    else if (key == "updates_per_episode") updates_per_episode = to_size(key, v);
    else if (key == "checkpoint_every") checkpoint_every = to_size(key, v);
    else if (key == "validation_scenarios") validation_scenarios = to_size(key, v);
    else if (key == "buffer_capacity") buffer_capacity = to_size(key, v);
    else if (key == "hard_fraction") hard_fraction = to_double(key, v);
    else if (key == "cost_base") cost_base = to_double(key, v);
    else if (key == "seed") seed = to_size(key, v);
    else if (key == "critic") {
        if (v == "distributional") critic = CriticKind::Distributional;
        else if (v == "scalar") critic = CriticKind::Scalar;
        else throw std::invalid_argument("config key 'critic': expected distributional or scalar, got '" + v + "'");
    } else
        throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::parse(const std::string& text, TrainConfig base)
{
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(no) + ": expected key = value");
        base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return base;
}

TrainConfig TrainConfig::load(const std::string& path, TrainConfig base)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), base);
}

TrainConfig TrainConfig::parse(const std::string& text) { return parse(text, TrainConfig{}); }

TrainConfig TrainConfig::load(const std::string& path) { return load(path, TrainConfig{}); }

std::string TrainConfig::format() const
{
    std::ostringstream os;
    os << "M = " << M << "\nn = " << n << "\nepsilon = " << fmt(epsilon) << "\nE = " << E << "\nR = " << R
       << "\nT = " << T << "\ngamma = " << fmt(gamma) << "\nlr = " << fmt(lr) << "\nmu = " << fmt(mu)
       << "\nsamples = " << samples << "\nnoise_sigma = " << fmt(noise_sigma) << "\nnoise_decay = " << fmt(noise_decay)
       << "\nupdates_per_episode = " << updates_per_episode << "\ncheckpoint_every = " << checkpoint_every
       << "\nvalidation_scenarios = " << validation_scenarios << "\nbuffer_capacity = " << buffer_capacity
       << "\nhard_fraction = " << fmt(hard_fraction) << "\ncost_base = " << fmt(cost_base)
       << "\ncritic = " << (critic == CriticKind::Distributional ? "distributional" : "scalar") << "\nseed = " << seed
       << "\n";
    return os.str();
}

ScenarioSpec TrainConfig::scenario_spec() const
{
    ScenarioSpec s;
    s.samples = samples;
    s.hard_fraction = hard_fraction;
    return s;
}

AgentConfig TrainConfig::agent_config() const
{
    AgentConfig a;
    a.critic = critic;
    return a;
}

double episode_objective(const EnvState& final_state, const std::vector<double>& cumulative_action,
                         const std::vector<double>& costs, double mu, double cost_base)
{
    if (cumulative_action.size() != costs.size()) throw ShapeError("action length differs from the cost vector");
    double cost = 0.0;
    for (std::size_t g = 0; g < costs.size(); ++g) cost += costs[g] * std::abs(cumulative_action[g]);
    return final_state.stable_fraction() + final_state.mean_pf() - mu * cost / cost_base;
}

std::string format_episode(const EpisodeLog& e)
{
    std::ostringstream os;
    os << std::setprecision(9) << "episode=" << e.episode << " return=" << e.mean_return
       << " critic_loss=" << e.critic_loss << " actor_loss=" << e.actor_loss << " buffer=" << e.buffer
       << " validation=" << e.validation;
    return os.str();
}

RolloutResult rollout(RedispatchEnv& env, AgentNets& nets, const ScenarioDistribution& scenario, std::size_t T,
                      const std::vector<double>& costs, double mu, double cost_base)
{
    RolloutResult r;
    r.initial = env.observe(scenario);
    EnvState s = r.initial;
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> a = clipped(act(nets, *s.state), env.action_limit());
        StepOutcome o = env.step(s, a);
        r.actions.push_back(std::move(a));
        s = std::move(o.next);
    }
    r.objective = episode_objective(s, s.cumulative_action, costs, mu, cost_base);
    r.final = std::move(s);
    return r;
}

std::vector<ScenarioDistribution> scenario_pool(const NetworkCase& net, RedispatchEnv& env, const ScenarioSpec& spec,
                                                std::size_t count, std::uint64_t seed)
{
    std::vector<ScenarioDistribution> pool;
    for (std::size_t k = 0; k < count; ++k) {
        Rng rng = stream_rng(seed, k, 0, 0x706f6f6cu);
        pool.push_back(sample_training_scenario(net, env, spec, rng));
    }
    return pool;
}

TrainResult run_training(const NetworkCase& net, const SurrogateModel& surrogate, const TrainConfig& config,
                         const TrainCallbacks& callbacks, const TrainingState* resume)
{
    config.validate();
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const AgentConfig agent = config.agent_config();
    const std::vector<double> costs = adjustable_costs(net);
    if (costs.size() != agent.actions) throw ShapeError("network adjustable machines differ from the agent action width");
    const ScenarioSpec spec = config.scenario_spec();

    TrainingState st;
    if (resume) {
        st = *resume;
    } else {
        Rng init = stream_rng(config.seed, 0, 0, 0x696e6974u);
        st.online = AgentNets::create(agent, init);
        st.target = st.online;
    }
    AgentNets best = st.online;

    std::vector<std::unique_ptr<RedispatchEnv>> envs;
    for (std::size_t j = 0; j < config.n; ++j) {
        envs.push_back(std::make_unique<RedispatchEnv>(net, surrogate));
        envs.back()->set_action_limit(agent.action_limit);
    }
    ScenarioSpec vspec = spec;
    const auto validation_pool = scenario_pool(net, *envs[0], vspec, config.validation_scenarios, config.seed ^ 0x76616cULL);
    auto validate_now = [&](AgentNets& nets) {
        double s = 0.0;
        for (const auto& sc : validation_pool) s += rollout(*envs[0], nets, sc, config.T, costs, config.mu, config.cost_base).objective;
        return s / static_cast<double>(validation_pool.size());
    };

    ReplayBuffer buffer(config.buffer_capacity);
    const AdamConfig adam{config.lr};
    TrainResult result;

    for (std::size_t i = st.episode; i < config.E; ++i) {
        const bool warmup = i < config.R;
        const double sigma = warmup ? 0.0 : config.noise_sigma * std::pow(config.noise_decay, static_cast<double>(i - config.R));
        std::vector<WorkerEpisode> episodes(config.n);
        std::vector<std::exception_ptr> errors(config.n);
        std::vector<AgentNets> snapshots(warmup ? 0 : config.n, st.online);
        auto work = [&](std::size_t j) {
            try {
                Rng rng = stream_rng(config.seed, i, j, 0x776f726bu);
                RedispatchEnv& env = *envs[j];
                EnvState s = env.observe(sample_training_scenario(net, env, spec, rng));
                std::uniform_real_distribution<double> u(-agent.action_limit, agent.action_limit);
                std::normal_distribution<double> noise(0.0, 1.0);
                WorkerEpisode& ep = episodes[j];
                for (std::size_t t = 0; t < config.T; ++t) {
                    std::vector<double> a(agent.actions);
                    if (warmup) {
                        for (double& x : a) x = u(rng);
                    } else {
                        a = act(snapshots[j], *s.state);
                        for (double& x : a) x += sigma * noise(rng);
                    }
                    a = clipped(std::move(a), agent.action_limit);
                    StepOutcome o = env.step(s, a);
                    Transition tr;
                    tr.state = s.state;
                    tr.action = std::move(a);
                    tr.pf_reward = o.rewards.pf;
                    tr.tsi_rewards = std::move(o.rewards.tsi);
                    tr.next_state = o.next.state;
                    tr.terminal = t + 1 == config.T;
                    ep.transitions.push_back(std::move(tr));
                    s = std::move(o.next);
                }
                ep.objective = episode_objective(s, s.cumulative_action, costs, config.mu, config.cost_base);
                for (auto& tr : ep.transitions) tr.priority = ep.objective;
            } catch (...) {
                errors[j] = std::current_exception();
            }
        };
        if (config.n == 1) {
            work(0);
        } else {
            std::vector<std::thread> threads;
            for (std::size_t j = 0; j < config.n; ++j) threads.emplace_back(work, j);
            for (auto& th : threads) th.join();
        }
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);

        EpisodeLog log;
        log.episode = i + 1;
        log.critic_loss = kNaN;
        log.actor_loss = kNaN;
        log.validation = kNaN;
        for (auto& ep : episodes) {
            log.mean_return += ep.objective / static_cast<double>(config.n);
            for (auto& tr : ep.transitions) buffer.push(std::move(tr));
        }

        if (!warmup && buffer.size() >= config.M) {
            Rng lrng = stream_rng(config.seed, i, 0, 0x6c726e72u);
            double closs = 0.0, aloss = 0.0;
            for (std::size_t u = 0; u < config.updates_per_episode; ++u) {
                const auto sampled = mixed_sample(buffer, config.M, st.learner_steps++, lrng);
                std::vector<const Transition*> batch;
                for (const auto& p : sampled) batch.push_back(p.get());
                {
                    st.online.zero_grad();
                    Tape t;
                    const LossTerms l = critic_loss(t, st.online, st.target, batch, config.gamma);
                    t.backward(l.total);
                    adam_step(st.online.conv, adam);
                    adam_step(st.online.critic, adam);
                    closs += l.total.scalar();
                }
                {
                    st.online.zero_grad();
                    Tape t;
                    const Var l = actor_loss(t, st.online, batch, costs, config.mu, config.cost_base);
                    t.backward(l);
                    adam_step(st.online.actor, adam);
                    aloss += l.scalar();
                }
                st.target.soft_update_from(st.online, config.epsilon);
            }
            log.critic_loss = closs / static_cast<double>(config.updates_per_episode);
            log.actor_loss = aloss / static_cast<double>(config.updates_per_episode);
        }
        log.buffer = buffer.size();
        st.episode = i + 1;

        if (st.episode % config.checkpoint_every == 0 || st.episode == config.E) {
            log.validation = validate_now(st.online);
            const bool is_best = log.validation > st.best_validation;
            if (is_best) {
                st.best_validation = log.validation;
                st.best_episode = st.episode;
                best = st.online;
            }
            if (callbacks.on_checkpoint) callbacks.on_checkpoint(st, is_best);
        }
        log.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
        if (callbacks.on_episode) callbacks.on_episode(log);
        result.log.push_back(log);
    }
    result.best = st.best_episode > 0 ? best : st.online;
    result.last = st.online;
    result.best_episode = st.best_episode;
    result.best_validation = st.best_validation;
    return result;
}

namespace {

NamedArrays export_nets(const AgentNets& nets, bool optimizer)
{
    NamedArrays a;
    export_parameters(nets.conv, "conv/", a, optimizer);
    export_parameters(nets.actor, "actor/", a, optimizer);
    export_parameters(nets.critic, "critic/", a, optimizer);
    return a;
}

void import_nets(AgentNets& nets, const NamedArrays& a, bool optimizer)
{
    import_parameters(nets.conv, "conv/", a, optimizer);
    import_parameters(nets.actor, "actor/", a, optimizer);
    import_parameters(nets.critic, "critic/", a, optimizer);
}

AgentNets blank_nets(const AgentConfig& config)
{
    Rng rng(0);
    return AgentNets::create(config, rng);
}

}  // namespace

void save_agent(const std::string& dir, const AgentNets& nets)
{
    std::filesystem::create_directories(dir);
    save_arrays((std::filesystem::path(dir) / "online.arrays").string(), export_nets(nets, false));
}

AgentNets load_agent(const std::string& dir, const AgentConfig& config)
{
    const auto path = std::filesystem::path(dir) / "online.arrays";
    if (!std::filesystem::exists(path)) throw std::runtime_error("agent checkpoint missing: " + path.string());
    AgentNets nets = blank_nets(config);
    import_nets(nets, load_arrays(path.string()), false);
    return nets;
}

void save_checkpoint(const std::string& dir, const TrainingState& state, const TrainConfig& config)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_arrays((fs::path(dir) / "online.arrays").string(), export_nets(state.online, true));
    save_arrays((fs::path(dir) / "target.arrays").string(), export_nets(state.target, false));
    std::ofstream(fs::path(dir) / "config.txt") << config.format();
    std::ofstream(fs::path(dir) / "state.txt") << "episode = " << state.episode << "\nlearner_steps = " << state.learner_steps
                                               << "\nbest_validation = " << fmt(state.best_validation)
                                               << "\nbest_episode = " << state.best_episode << "\n";
}

TrainingState load_checkpoint(const std::string& dir, const TrainConfig& config)
{
    namespace fs = std::filesystem;
    const fs::path state_path = fs::path(dir) / "state.txt";
    std::ifstream in(state_path);
    if (!in) throw std::runtime_error("checkpoint missing: " + state_path.string());
    TrainingState st;
    st.online = blank_nets(config.agent_config());
    st.target = st.online;
    import_nets(st.online, load_arrays((fs::path(dir) / "online.arrays").string()), true);
    import_nets(st.target, load_arrays((fs::path(dir) / "target.arrays").string()), false);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key == "episode") st.episode = to_size(key, value);
        else if (key == "learner_steps") st.learner_steps = to_size(key, value);
        else if (key == "best_validation") st.best_validation = to_double(key, value);
        else if (key == "best_episode") st.best_episode = to_size(key, value);
    }
    return st;
}

}  // namespace gd2rl
