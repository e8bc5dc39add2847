#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gd2rl/dataset.hpp"
#include "gd2rl/evaluation.hpp"
#include "gd2rl/surrogate.hpp"
#include "gd2rl/trainer.hpp"

namespace fs = std::filesystem;
using namespace gd2rl;

namespace {

constexpr int kUsage = 2;
constexpr int kFailure = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string case_path;
    std::string config;
    std::uint64_t seed = 1;
    std::string out_dir = ".";
    bool paper = false;
};

struct PoolOptions {
    std::string kind = "hard";
    std::size_t scenarios = 20;
    std::size_t samples = 50;
    std::uint64_t seed = 777;
};

NetworkCase load_network(const Globals& g) { return load_case(g.case_path.empty() ? shipped_case_path() : g.case_path); }

fs::path out(const Globals& g, const std::string& name)
{
    fs::create_directories(g.out_dir);
    return fs::path(g.out_dir) / name;
}

void write_file(const fs::path& path, const std::string& text)
{
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

std::string input_or_default(const Globals& g, const std::string& given, const std::string& name)
{
    const std::string p = given.empty() ? (fs::path(g.out_dir) / name).string() : given;
    if (!fs::exists(p)) throw UsageError("input file not found: " + p);
    return p;
}

TrainConfig train_config(const Globals& g, const std::vector<std::string>& sets, bool seed_given)
{
    TrainConfig c = g.paper ? TrainConfig{} : TrainConfig::desk();
    if (!g.config.empty()) {
        if (!fs::exists(g.config)) throw UsageError("config file not found: " + g.config);
        try {
            c = TrainConfig::load(g.config, c);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        try {
            c.set(kv.substr(0, eq), kv.substr(eq + 1));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    if (seed_given) c.seed = g.seed;
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

std::vector<ScenarioDistribution> make_pool(const NetworkCase& net, const PoolOptions& p)
{
    if (p.kind == "hard") return hard_pool(net, p.scenarios, p.samples, p.seed);
    if (p.kind == "mixed") return mixed_pool(net, p.scenarios, p.samples, p.seed);
    throw UsageError("--pool must be hard or mixed");
}

void add_pool_options(CLI::App* sub, PoolOptions& p)
{
    sub->add_option("--pool", p.kind, "Scenario pool: hard (truly unstable base) or mixed")->capture_default_str();
    sub->add_option("--scenarios", p.scenarios, "Pool size")->capture_default_str();
    sub->add_option("--samples", p.samples, "Deterministic samples per scenario")->capture_default_str();
    sub->add_option("--pool-seed", p.seed, "Pool seed")->capture_default_str();
}

std::string metrics_text(const std::string& title, const SurrogateMetrics& m)
{
    return "# " + title + "\n" + format_metrics(m);
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Distributional redispatch agent with a graph surrogate of transient stability"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--case", g.case_path, "Network case file (default: shipped modified 39-bus case)");
    app.add_option("--config", g.config, "Training config file (key = value)");
    auto* seed_opt = app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
    auto* desk_flag = app.add_flag("--desk-scale", "Desk-scale protocol and profiles (default)");
    app.add_flag("--paper-scale", g.paper, "Paper-scale protocol and profiles")->excludes(desk_flag);

    bool yes = false;
    auto* gen = app.add_subcommand("gen-dataset", "Generate the surrogate dataset -> dataset.csv");
    gen->add_flag("--yes", yes, "Skip the confirmation prompt at paper scale");

    std::string dataset_path, model_path;
    auto* tsur = app.add_subcommand("train-surrogate", "Train the surrogate -> surrogate.bin, surrogate_history.txt, surrogate_metrics.txt");
    tsur->add_option("--dataset", dataset_path, "Dataset file (default: <out-dir>/dataset.csv)");

    auto* esur = app.add_subcommand("eval-surrogate", "Held-out surrogate metrics -> surrogate_eval.txt");
    esur->add_option("--dataset", dataset_path, "Dataset file (default: <out-dir>/dataset.csv)");
    esur->add_option("--model", model_path, "Surrogate file (default: <out-dir>/surrogate.bin)");

    std::vector<std::string> sets;
    std::string resume;
    auto* tagent = app.add_subcommand("train-agent", "Train the agent -> agent/, train_log.txt, train_wall.txt");
    tagent->add_option("--model", model_path, "Surrogate file (default: <out-dir>/surrogate.bin)");
    tagent->add_option("--set", sets, "Config override key=value (repeatable)");
    tagent->add_option("--resume", resume, "Checkpoint directory to resume from");

    std::string agent_dir;
    PoolOptions pool;
    std::size_t scenario_index = 0;
    auto* redis = app.add_subcommand("redispatch", "Agent rollout on one pool scenario -> redispatch.txt, redispatch_hist.txt");
    redis->add_option("--model", model_path, "Surrogate file (default: <out-dir>/surrogate.bin)");
    redis->add_option("--agent", agent_dir, "Agent directory (default: <out-dir>/agent/best)");
    redis->add_option("--set", sets, "Config override key=value (repeatable)");
    redis->add_option("--index", scenario_index, "Scenario index within the pool")->capture_default_str();
    add_pool_options(redis, pool);

    std::string policy = "agent";
    std::size_t threads = 1;
    auto* evaluate = app.add_subcommand("evaluate", "True-simulator validation on a pool -> evaluation.txt, evaluation_faults.txt");
    evaluate->add_option("--model", model_path, "Surrogate file (default: <out-dir>/surrogate.bin)");
    evaluate->add_option("--agent", agent_dir, "Agent directory (default: <out-dir>/agent/best)");
    evaluate->add_option("--set", sets, "Config override key=value (repeatable)");
    evaluate->add_option("--policy", policy, "agent, zero or random")->capture_default_str();
    evaluate->add_option("--threads", threads, "Scenario threads")->capture_default_str();
    add_pool_options(evaluate, pool);

    std::string backend = "true";
    PsoConfig pso_cfg;
    auto* pso = app.add_subcommand("pso", "PSO redispatch baseline on a pool -> pso.txt");
    pso->add_option("--model", model_path, "Surrogate file (needed for --backend surrogate)");
    pso->add_option("--backend", backend, "Fitness backend: true or surrogate")->capture_default_str();
    pso->add_option("--particles", pso_cfg.particles)->capture_default_str();
    pso->add_option("--iterations", pso_cfg.iterations)->capture_default_str();
    pso->add_option("--set", sets, "Config override key=value (mu, cost_base)");
    add_pool_options(pso, pool);

    std::vector<std::size_t> budgets{10, 25, 50};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    auto* cmp = app.add_subcommand("compare-rl", "Distributional vs scalar critic -> comparison.txt, comparison_curves.txt");
    cmp->add_option("--model", model_path, "Surrogate file (default: <out-dir>/surrogate.bin)");
    cmp->add_option("--budgets", budgets, "Deterministic-sample budgets")->delimiter(',')->capture_default_str();
    cmp->add_option("--seeds", seeds, "Training seeds")->delimiter(',')->capture_default_str();
    cmp->add_option("--set", sets, "Config override key=value (repeatable)");
    add_pool_options(cmp, pool);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    const bool seed_given = seed_opt->count() > 0;
    try {
        const NetworkCase net = load_network(g);
        if (*gen) {
            const DatasetProtocol p = g.paper ? DatasetProtocol::paper() : DatasetProtocol::desk();
            std::cout << "target records: " << p.target_records(net) << std::endl;
            if (g.paper && !yes) {
                std::cout << "Proceed? [y/N] " << std::flush;
                std::string answer;
                std::getline(std::cin, answer);
                if (answer != "y" && answer != "Y") {
                    std::cout << "aborted\n";
                    return 0;
                }
            }
            const Dataset d = generate_dataset(net, p, g.seed, [](const std::string& s) { std::cout << s << std::endl; });
            write_dataset(d, out(g, "dataset.csv").string());
            std::cout << "wrote " << d.records.size() << " records to " << out(g, "dataset.csv").string() << "\n";
        } else if (*tsur) {
            const Dataset d = read_dataset(input_or_default(g, dataset_path, "dataset.csv"));
            SurrogateTrainConfig c = g.paper ? SurrogateTrainConfig::paper() : SurrogateTrainConfig::desk();
            c.seed = g.seed;
            std::ostringstream hist;
            hist << "epoch lr train_mse validation_mse\n";
            const auto res = train_surrogate(net, d, c, [](const std::string& s) { std::cout << s << std::endl; });
            for (const auto& e : res.history) hist << e.epoch << ' ' << e.lr << ' ' << e.train_mse << ' ' << e.validation_mse << '\n';
            save_surrogate(res.model, out(g, "surrogate.bin").string());
            write_file(out(g, "surrogate_history.txt"), hist.str());
            const std::string m = "# best epoch " + std::to_string(res.best_epoch) + "\n" +
                                  metrics_text("validation", res.validation) + metrics_text("test", res.test);
            write_file(out(g, "surrogate_metrics.txt"), m);
            std::cout << m;
        } else if (*esur) {
            const Dataset d = read_dataset(input_or_default(g, dataset_path, "dataset.csv"));
            SurrogateModel model = load_surrogate(net, input_or_default(g, model_path, "surrogate.bin"));
            const DatasetSplit split = split_dataset(d, g.seed);
            const std::string m = metrics_text("test", surrogate_metrics(model, d, split.test));
            write_file(out(g, "surrogate_eval.txt"), m);
            std::cout << m;
        } else if (*tagent) {
            const TrainConfig c = train_config(g, sets, seed_given);
            const SurrogateModel model = load_surrogate(net, input_or_default(g, model_path, "surrogate.bin"));
            const fs::path agent = out(g, "agent");
            write_file(out(g, "train_config.txt"), c.format());
            TrainingState resumed;
            if (!resume.empty()) resumed = load_checkpoint(resume, c);
            std::ofstream log(out(g, "train_log.txt"), resume.empty() ? std::ios::trunc : std::ios::app);
            std::ofstream wall(out(g, "train_wall.txt"), resume.empty() ? std::ios::trunc : std::ios::app);
            TrainCallbacks cb;
            cb.on_episode = [&](const EpisodeLog& e) {
                log << format_episode(e) << '\n' << std::flush;
                wall << e.episode << ' ' << e.wall_seconds << '\n';
                if (e.episode % 10 == 0) std::cout << format_episode(e) << " wall=" << e.wall_seconds << std::endl;
            };
            cb.on_checkpoint = [&](const TrainingState& st, bool best) {
                save_checkpoint((agent / "checkpoint").string(), st, c);
                if (best) save_agent((agent / "best").string(), st.online);
            };
            const TrainResult r = run_training(net, model, c, cb, resume.empty() ? nullptr : &resumed);
            save_agent((agent / "last").string(), r.last);
            std::cout << "best episode " << r.best_episode << " validation " << r.best_validation << "\n";
        } else if (*redis || *evaluate) {
            const TrainConfig c = train_config(g, sets, seed_given);
            const SurrogateModel model = load_surrogate(net, input_or_default(g, model_path, "surrogate.bin"));
            EvaluationOptions o;
            o.T = c.T;
            o.seed = g.seed;
            o.threads = threads;
            if (policy == "agent") o.policy = PolicyKind::Agent;
            else if (policy == "zero") o.policy = PolicyKind::Zero;
            else if (policy == "random") o.policy = PolicyKind::Random;
            else throw UsageError("--policy must be agent, zero or random");
            AgentNets nets;
            if (o.policy == PolicyKind::Agent) {
                const std::string dir = agent_dir.empty() ? (fs::path(g.out_dir) / "agent" / "best").string() : agent_dir;
                nets = load_agent(dir, c.agent_config());
            }
            if (*redis) {
                PoolOptions p = pool;
                p.scenarios = scenario_index + 1;
                const auto all = make_pool(net, p);
                const EvaluationReport rep = evaluate_policy(net, model, &nets, {all.back()}, o);
                write_file(out(g, "redispatch.txt"), format_report(rep));
                write_file(out(g, "redispatch_hist.txt"), format_histograms(rep.scenarios.front()));
                std::cout << format_report(rep);
            } else {
                const EvaluationReport rep = evaluate_policy(net, model, o.policy == PolicyKind::Agent ? &nets : nullptr,
                                                             make_pool(net, pool), o);
                write_file(out(g, "evaluation.txt"), format_report(rep));
                write_file(out(g, "evaluation_faults.txt"), format_fault_table(rep));
                std::cout << format_fault_table(rep) << "mean confidence " << rep.mean_pre() << " -> " << rep.mean_post()
                          << " %, mean cost " << rep.mean_cost() << " $\n";
            }
        } else if (*pso) {
            const TrainConfig c = train_config(g, sets, seed_given);
            if (backend != "true" && backend != "surrogate") throw UsageError("--backend must be true or surrogate");
            const FitnessBackend b = backend == "true" ? FitnessBackend::TrueSim : FitnessBackend::Surrogate;
            SurrogateModel model;
            if (b == FitnessBackend::Surrogate) model = load_surrogate(net, input_or_default(g, model_path, "surrogate.bin"));
            std::ostringstream os;
            os << "# backend " << backend << "\nscenario fault level confidence cost objective seconds";
            for (std::size_t k = 1; k <= net.adjustable().size(); ++k) os << " a" << k;
            os << '\n';
            const auto scenarios = make_pool(net, pool);
            for (std::size_t k = 0; k < scenarios.size(); ++k) {
                Rng rng(g.seed + k);
                const PsoRedispatch r = pso_redispatch(net, b == FitnessBackend::Surrogate ? &model : nullptr, scenarios[k], b,
                                                       pso_cfg, c.mu, c.cost_base, rng);
                os << k << ' ' << scenarios[k].contingency.branch_id << ' ' << scenarios[k].level << ' ' << r.confidence << ' '
                   << r.cost << ' ' << r.search.best_value << ' ' << r.seconds;
                for (double a : r.search.best) os << ' ' << a;
                os << '\n';
                std::cout << "scenario " << k << ": confidence " << r.confidence << " %, cost " << r.cost << " $, "
                          << r.seconds << " s" << std::endl;
            }
            write_file(out(g, "pso.txt"), os.str());
        } else if (*cmp) {
            const TrainConfig c = train_config(g, sets, seed_given);
            const SurrogateModel model = load_surrogate(net, input_or_default(g, model_path, "surrogate.bin"));
            const auto scenarios = make_pool(net, pool);
            const auto rows = compare_rl(net, model, c, budgets, seeds, scenarios, [](const ComparisonRow& r) {
                std::cout << r.method << " budget " << r.budget << " seed " << r.seed << ": " << r.confidence << " %" << std::endl;
            });
            write_file(out(g, "comparison.txt"), format_comparison(rows));
            std::ostringstream curves;
            curves << "method budget smoothed_confidence\n";
            for (const char* m : {"distrl", "scalar"})
                for (const auto& [b, v] : monotone_curve(rows, m)) curves << m << ' ' << b << ' ' << v << '\n';
            write_file(out(g, "comparison_curves.txt"), curves.str());
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return 0;
}
