#include "gd2rl/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace gd2rl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
using clock = std::chrono::steady_clock;

double seconds_since(clock::time_point t0) { return std::chrono::duration<double>(clock::now() - t0).count(); }

Rng stream_rng(std::uint64_t seed, std::uint64_t k, std::uint32_t tag)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32), tag};
    return Rng(seq);
}

bool is_zero(const std::vector<double>& a)
{
    return std::all_of(a.begin(), a.end(), [](double x) { return x == 0.0; });
}

struct TrueValues {
    std::vector<double> tsi;
    std::vector<double> pf;
};

TrueValues true_values(const NetworkCase& net, const ScenarioDistribution& scenario, const std::vector<double>& action,
                       const std::vector<PowerFlowSolution>* warm = nullptr)
{
    const bool zero = is_zero(action);
    TrueValues v;
    for (std::size_t k = 0; k < scenario.samples.size(); ++k) {
        const OperatingState s = zero ? scenario.samples[k] : apply_redispatch(net, scenario.samples[k], action);
        const PowerFlowSolution* w = warm && (*warm)[k].converged ? &(*warm)[k] : nullptr;
        const PowerFlowSolution sol = solve_power_flow(net, s, w);
        v.pf.push_back(pf_value(sol, net));
        double t = kNaN;
        if (sol.converged) {
            try {
                t = tsi(simulate(net, sol, scenario.contingency));
            } catch (const SingularReductionError&) {
                t = kNaN;
            }
        }
        v.tsi.push_back(t);
    }
    return v;
}

double objective_of(const std::vector<double>& tsi, const std::vector<double>& pf, const std::vector<double>& action,
                    const std::vector<double>& costs, double mu, double cost_base)
{
    EnvState s;
    s.values.tsi = tsi;
    s.values.pf = pf;
    return episode_objective(s, action, costs, mu, cost_base);
}

std::vector<double> levels_from(double min_level)
{
    std::vector<double> out;
    for (double l : stress_levels())
        if (l >= min_level - 1e-9) out.push_back(l);
    if (out.empty()) throw std::invalid_argument("no stress level at or above the minimum");
    return out;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng)
{
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string num(double x)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<std::string> split_ws(const std::string& line)
{
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

double to_number(const std::string& s)
{
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw std::invalid_argument("table: '" + s + "' is not a number");
    return x;
}

}  // namespace

std::vector<double> true_tsi(const NetworkCase& net, const ScenarioDistribution& scenario,
                             const std::vector<double>& action_mw)
{
    return true_values(net, scenario, action_mw).tsi;
}

double stable_share(const std::vector<double>& tsi)
{
    if (tsi.empty()) return 0.0;
    const auto n = std::count_if(tsi.begin(), tsi.end(), [](double v) { return v > 0.0; });
    return static_cast<double>(n) / static_cast<double>(tsi.size());
}

CategoricalTsiDistribution tsi_histogram(const std::vector<double>& tsi)
{
    if (std::all_of(tsi.begin(), tsi.end(), [](double v) { return std::isnan(v); })) {
        CategoricalTsiDistribution d;
        d.probs[0] = 1.0;
        return d;
    }
    return empirical_tsi_distribution(tsi);
}

CategoricalTsiDistribution shift_distribution(const CategoricalTsiDistribution& pre,
                                              const CategoricalTsiDistribution& change)
{
    CategoricalTsiDistribution out;
    for (std::size_t i = 0; i < kAtoms; ++i) {
        if (pre.probs[i] == 0.0) continue;
        for (std::size_t j = 0; j < kAtoms; ++j)
            if (change.probs[j] != 0.0) two_hot_add(out, atom(i) + atom(j), pre.probs[i] * change.probs[j]);
    }
    return out;
}

std::vector<ScenarioDistribution> hard_pool(const NetworkCase& net, std::size_t count, std::size_t samples,
                                            std::uint64_t seed, double min_level, std::size_t max_draws)
{
    const std::vector<double> levels = levels_from(min_level);
    const std::vector<int> lines = net.faultable_lines();
    std::vector<ScenarioDistribution> pool;
    for (std::size_t k = 0; k < count; ++k) {
        Rng rng = stream_rng(seed, k, 0x68617264u);
        for (std::size_t draw = 0;; ++draw) {
            if (draw == max_draws) throw std::runtime_error("hard_pool: no unstable scenario found");
            const double level = pick(levels, rng);
            const OperatingState base = sample_base_state(net, level, rng);
            const Contingency c{pick(lines, rng), 0.5, 0.1};
            const PowerFlowSolution sol = solve_power_flow(net, base);
            if (!sol.converged) continue;
            double t = 1.0;
            try {
                t = tsi(simulate(net, sol, c));
            } catch (const SingularReductionError&) {
                continue;
            }
            if (t > 0.0) continue;
            ScenarioDistribution sc = sample_scenario(net, base, c, samples, rng);
            sc.level = level;
            pool.push_back(std::move(sc));
            break;
        }
    }
    return pool;
}

std::vector<ScenarioDistribution> mixed_pool(const NetworkCase& net, std::size_t count, std::size_t samples,
                                             std::uint64_t seed)
{
    const std::vector<double> levels = stress_levels();
    const std::vector<int> lines = net.faultable_lines();
    std::vector<ScenarioDistribution> pool;
    for (std::size_t k = 0; k < count; ++k) {
        Rng rng = stream_rng(seed, k, 0x6d697864u);
        const double level = pick(levels, rng);
        const OperatingState base = sample_base_state(net, level, rng);
        ScenarioDistribution sc = sample_scenario(net, base, Contingency{pick(lines, rng), 0.5, 0.1}, samples, rng);
        sc.level = level;
        pool.push_back(std::move(sc));
    }
    return pool;
}

double EvaluationReport::mean_pre() const
{
    double s = 0.0;
    for (const auto& r : scenarios) s += r.pre_confidence;
    return scenarios.empty() ? 0.0 : s / static_cast<double>(scenarios.size());
}

double EvaluationReport::mean_post() const
{
    double s = 0.0;
    for (const auto& r : scenarios) s += r.post_confidence;
    return scenarios.empty() ? 0.0 : s / static_cast<double>(scenarios.size());
}

double EvaluationReport::mean_cost() const
{
    double s = 0.0;
    for (const auto& r : scenarios) s += r.cost;
    return scenarios.empty() ? 0.0 : s / static_cast<double>(scenarios.size());
}

std::vector<FaultRow> EvaluationReport::per_fault() const
{
    std::map<int, FaultRow> rows;
    for (const auto& r : scenarios) {
        FaultRow& f = rows[r.fault];
        f.fault = r.fault;
        ++f.scenarios;
        f.pre_confidence += r.pre_confidence;
        f.post_confidence += r.post_confidence;
        f.cost += r.cost;
    }
    std::vector<FaultRow> out;
    for (auto& [id, f] : rows) {
        const double n = static_cast<double>(f.scenarios);
        f.pre_confidence /= n;
        f.post_confidence /= n;
        f.cost /= n;
        out.push_back(f);
    }
    return out;
}

EvaluationReport evaluate_policy(const NetworkCase& net, const SurrogateModel& surrogate, const AgentNets* nets,
                                 const std::vector<ScenarioDistribution>& pool, const EvaluationOptions& options)
{
    if (options.policy == PolicyKind::Agent && !nets) throw std::invalid_argument("agent policy needs networks");
    if (options.T == 0) throw std::invalid_argument("T must be at least 1");
    EvaluationReport report;
    report.policy = options.policy == PolicyKind::Agent ? "agent" : options.policy == PolicyKind::Zero ? "zero" : "random";
    report.scenarios.resize(pool.size());
    const std::vector<double> costs = adjustable_costs(net);
    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, pool.size()));
    std::vector<std::exception_ptr> errors(threads);

    auto work = [&](std::size_t w) {
        try {
            RedispatchEnv env(net, surrogate);
            AgentNets local;
            if (nets) {
                local = *nets;
                env.set_action_limit(nets->config.action_limit);
            }
            for (std::size_t k = w; k < pool.size(); k += threads) {
                const ScenarioDistribution& sc = pool[k];
                ScenarioReport& r = report.scenarios[k];
                r.index = k;
                r.level = sc.level;
                r.fault = sc.contingency.branch_id;
                const auto t0 = clock::now();
                EnvState s = env.observe(sc);
                const EnvState initial = s;
                std::vector<std::vector<double>> actions;
                if (options.policy != PolicyKind::Zero) {
                    Rng rng = stream_rng(options.seed, k, 0x72616e64u);
                    std::uniform_real_distribution<double> u(-env.action_limit(), env.action_limit());
                    for (std::size_t t = 0; t < options.T; ++t) {
                        std::vector<double> a(costs.size());
                        if (options.policy == PolicyKind::Agent) {
                            a = act(local, *s.state);
                            for (double& x : a) x = std::clamp(x, -env.action_limit(), env.action_limit());
                        } else {
                            for (double& x : a) x = u(rng);
                        }
                        StepOutcome o = env.step(s, a);
                        actions.push_back(std::move(a));
                        s = std::move(o.next);
                    }
                }
                r.agent_seconds = seconds_since(t0);
                r.action.assign(costs.size(), 0.0);
                for (const auto& a : actions)
                    for (std::size_t g = 0; g < a.size(); ++g) r.action[g] += a[g];
                r.cost = redispatch_cost(net, r.action);
                r.surrogate_pre = 100.0 * initial.stable_fraction();
                r.surrogate_post = 100.0 * s.stable_fraction();

                const std::vector<double> pre = true_tsi(net, sc, std::vector<double>(costs.size(), 0.0));
                const std::vector<double> post = is_zero(r.action) ? pre : true_tsi(net, sc, r.action);
                r.pre_confidence = 100.0 * stable_share(pre);
                r.post_confidence = 100.0 * stable_share(post);
                r.pre_hist = tsi_histogram(pre);
                r.post_hist = tsi_histogram(post);
                if (options.policy == PolicyKind::Agent) {
                    const CriticOutput c = evaluate_critic(local, *initial.state, actions.front());
                    CategoricalTsiDistribution change = c.tsi;
                    if (local.config.critic == CriticKind::Scalar) {
                        change = CategoricalTsiDistribution{};
                        two_hot_add(change, c.expected_tsi, 1.0);
                    }
                    r.critic_hist = shift_distribution(r.pre_hist, change);
                } else {
                    r.critic_hist = r.pre_hist;
                }
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::thread> ts;
        for (std::size_t w = 0; w < threads; ++w) ts.emplace_back(work, w);
        for (auto& t : ts) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return report;
}

void PsoConfig::validate() const
{
    if (particles < 2) throw std::invalid_argument("PSO needs at least 2 particles");
    if (iterations == 0) throw std::invalid_argument("PSO needs at least 1 iteration");
    if (!(bound > 0.0)) throw std::invalid_argument("PSO bound must be positive");
    if (!(velocity_fraction > 0.0)) throw std::invalid_argument("PSO velocity fraction must be positive");
}

PsoResult pso_maximize(const std::function<double(const std::vector<double>&)>& objective, std::size_t dim,
                       const PsoConfig& config, Rng& rng)
{
    config.validate();
    if (dim == 0) throw std::invalid_argument("PSO dimension must be positive");
    const double vmax = config.velocity_fraction * 2.0 * config.bound;
    std::uniform_real_distribution<double> pos(-config.bound, config.bound), u01(0.0, 1.0);
    const std::size_t P = config.particles;
    std::vector<std::vector<double>> x(P, std::vector<double>(dim)), v(P, std::vector<double>(dim, 0.0));
    for (auto& p : x)
        for (double& c : p) c = pos(rng);
    std::vector<std::vector<double>> pbest = x;
    std::vector<double> pval(P);
    PsoResult r;
    for (std::size_t i = 0; i < P; ++i) pval[i] = objective(x[i]);
    r.evaluations = P;
    std::size_t g = static_cast<std::size_t>(std::max_element(pval.begin(), pval.end()) - pval.begin());
    r.best = pbest[g];
    r.best_value = pval[g];
    for (std::size_t it = 0; it < config.iterations; ++it) {
        for (std::size_t i = 0; i < P; ++i) {
            for (std::size_t d = 0; d < dim; ++d) {
                const double vel = config.inertia * v[i][d] + config.cognitive * u01(rng) * (pbest[i][d] - x[i][d]) +
                                   config.social * u01(rng) * (r.best[d] - x[i][d]);
                v[i][d] = std::clamp(vel, -vmax, vmax);
                x[i][d] = std::clamp(x[i][d] + v[i][d], -config.bound, config.bound);
            }
            const double f = objective(x[i]);
            ++r.evaluations;
            if (f > pval[i]) {
                pval[i] = f;
                pbest[i] = x[i];
            }
        }
        g = static_cast<std::size_t>(std::max_element(pval.begin(), pval.end()) - pval.begin());
        if (pval[g] > r.best_value) {
            r.best_value = pval[g];
            r.best = pbest[g];
        }
        r.history.push_back(r.best_value);
    }
    return r;
}

PsoRedispatch pso_redispatch(const NetworkCase& net, const SurrogateModel* surrogate, const ScenarioDistribution& scenario,
                             FitnessBackend backend, const PsoConfig& config, double mu, double cost_base, Rng& rng)
{
    if (backend == FitnessBackend::Surrogate && !surrogate) throw std::invalid_argument("surrogate fitness needs a model");
    const auto t0 = clock::now();
    const std::vector<double> costs = adjustable_costs(net);
    std::vector<PowerFlowSolution> warm;
    for (const auto& s : scenario.samples) warm.push_back(solve_power_flow(net, s));
    std::unique_ptr<RedispatchEnv> env;
    if (backend == FitnessBackend::Surrogate) env = std::make_unique<RedispatchEnv>(net, *surrogate);
    auto fitness = [&](const std::vector<double>& a) {
        if (backend == FitnessBackend::TrueSim) {
            const TrueValues v = true_values(net, scenario, a, &warm);
            return objective_of(v.tsi, v.pf, a, costs, mu, cost_base);
        }
        ScenarioDistribution moved = scenario;
        for (auto& s : moved.samples) s = apply_redispatch(net, s, a);
        const EnvState st = env->observe(std::move(moved), &warm);
        return objective_of(st.values.tsi, st.values.pf, a, costs, mu, cost_base);
    };
    PsoRedispatch out;
    out.search = pso_maximize(fitness, costs.size(), config, rng);
    out.cost = redispatch_cost(net, out.search.best);
    out.seconds = seconds_since(t0);
    out.confidence = 100.0 * stable_share(true_values(net, scenario, out.search.best, &warm).tsi);
    return out;
}

std::vector<ComparisonRow> compare_rl(const NetworkCase& net, const SurrogateModel& surrogate, const TrainConfig& base,
                                      const std::vector<std::size_t>& budgets, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<ScenarioDistribution>& pool,
                                      const std::function<void(const ComparisonRow&)>& on_row)
{
    std::vector<ComparisonRow> rows;
    for (std::size_t budget : budgets)
        for (std::uint64_t seed : seeds)
            for (CriticKind kind : {CriticKind::Distributional, CriticKind::Scalar}) {
                TrainConfig c = base;
                c.samples = budget;
                c.seed = seed;
                c.critic = kind;
                const auto t0 = clock::now();
                const TrainResult res = run_training(net, surrogate, c);
                ComparisonRow row;
                row.method = kind == CriticKind::Distributional ? "distrl" : "scalar";
                row.budget = budget;
                row.seed = seed;
                row.train_seconds = seconds_since(t0);
                EvaluationOptions eo;
                eo.T = c.T;
                const EvaluationReport rep = evaluate_policy(net, surrogate, &res.best, pool, eo);
                row.confidence = rep.mean_post();
                row.cost = rep.mean_cost();
                if (on_row) on_row(row);
                rows.push_back(row);
            }
    return rows;
}

std::vector<std::pair<std::size_t, double>> monotone_curve(const std::vector<ComparisonRow>& rows,
                                                           const std::string& method)
{
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows)
        if (r.method == method) {
            acc[r.budget].first += r.confidence;
            ++acc[r.budget].second;
        }
    std::vector<std::pair<std::size_t, double>> out;
    double running = -std::numeric_limits<double>::infinity();
    for (const auto& [b, s] : acc) {
        running = std::max(running, s.first / static_cast<double>(s.second));
        out.emplace_back(b, running);
    }
    return out;
}

std::string format_histograms(const ScenarioReport& r)
{
    std::ostringstream os;
    os << "# scenario " << r.index << " fault " << r.fault << " level " << num(r.level) << "\n";
    os << "atom pre critic post\n";
    for (std::size_t i = 0; i < kAtoms; ++i)
        os << num(atom(i)) << ' ' << num(r.pre_hist.probs[i]) << ' ' << num(r.critic_hist.probs[i]) << ' '
           << num(r.post_hist.probs[i]) << '\n';
    return os.str();
}

std::string format_report(const EvaluationReport& report)
{
    std::ostringstream os;
    os << "# policy " << report.policy << "\n# mean_pre_confidence " << num(report.mean_pre())
       << "\n# mean_post_confidence " << num(report.mean_post()) << "\n# mean_cost " << num(report.mean_cost()) << "\n";
    const std::size_t n = report.scenarios.empty() ? 0 : report.scenarios.front().action.size();
    os << "scenario level fault pre_confidence post_confidence surrogate_pre surrogate_post cost agent_seconds";
    for (std::size_t g = 0; g < n; ++g) os << " a" << g + 1;
    os << '\n';
    for (const auto& r : report.scenarios) {
        os << r.index << ' ' << num(r.level) << ' ' << r.fault << ' ' << num(r.pre_confidence) << ' '
           << num(r.post_confidence) << ' ' << num(r.surrogate_pre) << ' ' << num(r.surrogate_post) << ' ' << num(r.cost)
           << ' ' << num(r.agent_seconds);
        for (double a : r.action) os << ' ' << num(a);
        os << '\n';
    }
    return os.str();
}

std::string format_fault_table(const EvaluationReport& report)
{
    std::ostringstream os;
    os << "fault scenarios pre_confidence post_confidence cost\n";
    for (const auto& f : report.per_fault())
        os << f.fault << ' ' << f.scenarios << ' ' << num(f.pre_confidence) << ' ' << num(f.post_confidence) << ' '
           << num(f.cost) << '\n';
    return os.str();
}

std::string format_comparison(const std::vector<ComparisonRow>& rows)
{
    std::ostringstream os;
    os << "method budget seed confidence cost train_seconds\n";
    for (const auto& r : rows)
        os << r.method << ' ' << r.budget << ' ' << r.seed << ' ' << num(r.confidence) << ' ' << num(r.cost) << ' '
           << num(r.train_seconds) << '\n';
    return os.str();
}

std::size_t Table::column(const std::string& name) const
{
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::invalid_argument("table has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
}

double Table::number(std::size_t row, const std::string& name) const { return to_number(rows.at(row).at(column(name))); }

Table parse_table(const std::string& text)
{
    Table t;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cells = split_ws(line);
        if (cells.empty()) continue;
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            throw std::invalid_argument("table row has " + std::to_string(cells.size()) + " cells, header has " +
                                        std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw std::invalid_argument("table has no header");
    return t;
}

std::vector<ComparisonRow> parse_comparison(const std::string& text)
{
    const Table t = parse_table(text);
    std::vector<ComparisonRow> rows;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        ComparisonRow r;
        r.method = t.rows[i][t.column("method")];
        r.budget = static_cast<std::size_t>(t.number(i, "budget"));
        r.seed = static_cast<std::uint64_t>(t.number(i, "seed"));
        r.confidence = t.number(i, "confidence");
        r.cost = t.number(i, "cost");
        r.train_seconds = t.number(i, "train_seconds");
        rows.push_back(r);
    }
    return rows;
}

}  // namespace gd2rl
