#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gd2rl/trainer.hpp"
#include "toy_cases.hpp"

using namespace gd2rl;
using gd2rl::testing::shipped;

namespace {

SurrogateModel untrained(const NetworkCase& net)
{
    Rng rng(1);
    const GraphTemplate tpl = make_graph_template(net);
    const auto lines = net.faultable_lines();
    std::vector<HeteroGraph> raw;
    while (raw.size() < 6) {
        const OperatingState s = sample_base_state(net, 1.0, rng);
        const PowerFlowSolution sol = solve_power_flow(net, s);
        if (sol.converged) raw.push_back(build_graph(tpl, net, s, sol, Contingency{lines[raw.size()], 0.5, 0.1}));
    }
    SurrogateModel m = SurrogateModel::create(net, SimConfig{}.points(), {}, rng);
    m.stats = fit_norm_stats(raw);
    return m;
}

TrainConfig tiny()
{
    TrainConfig c;
    c.E = 4;
    c.R = 2;
    c.n = 2;
    c.T = 2;
    c.M = 4;
    c.samples = 3;
    c.checkpoint_every = 2;
    c.validation_scenarios = 1;
    c.hard_fraction = 0.0;
    return c;
}

double max_diff(const ParameterSet& a, const ParameterSet& b)
{
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, (a[i].value - b[i].value).cwiseAbs().maxCoeff());
    return d;
}

}  // namespace

TEST_CASE("config defaults, desk overrides and validation")
{
    const TrainConfig c;
    CHECK(c.M == 64);
    CHECK(c.n == 10);
    CHECK(c.epsilon == 0.001);
    CHECK(c.E == 10000);
    CHECK(c.R == 500);
    CHECK(c.T == 5);
    CHECK(c.gamma == 0.99);
    CHECK(c.lr == 0.001);
    CHECK(c.mu == 0.1);
    CHECK_NOTHROW(c.validate());
    const TrainConfig d = TrainConfig::desk();
    CHECK(d.E == 600);
    CHECK(d.R == 50);
    CHECK(d.n == 4);
    CHECK(d.samples == 50);
    TrainConfig bad = d;
    bad.R = bad.E;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = d;
    bad.T = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = d;
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.epsilon = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("config text round-trips and rejects malformed input")
{
    TrainConfig c = TrainConfig::desk();
    c.gamma = 0.95;
    c.critic = CriticKind::Scalar;
    c.seed = 42;
    const TrainConfig back = TrainConfig::parse(c.format());
    CHECK(back.format() == c.format());
    const TrainConfig p = TrainConfig::parse("# comment\nE = 20   # trailing\n\nR=5\nlr = 1e-4\n", TrainConfig::desk());
    CHECK(p.E == 20);
    CHECK(p.R == 5);
    CHECK(p.lr == 1e-4);
    CHECK(p.n == 4);
    CHECK_THROWS_AS(TrainConfig::parse("bogus = 1"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::parse("E = ten"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::parse("E = -3"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::parse("E 3"), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::parse("critic = quantile"), std::invalid_argument);
    CHECK_THROWS(TrainConfig::load("/nonexistent/train.cfg"));
}

TEST_CASE("episode objective combines stable mass, power-flow value and cost")
{
    const NetworkCase net = shipped();
    EnvState s;
    s.values.tsi = {0.5, -0.2, std::nan(""), 0.1};
    s.values.pf = {0.0, -0.2, -1.0, 0.0};
    const auto c = adjustable_costs(net);
    std::vector<double> a(c.size(), 0.0);
    a[0] = 100.0;
    a[1] = -50.0;
    const double cost = c[0] * 100.0 + c[1] * 50.0;
    CHECK(episode_objective(s, a, c, 0.1, 100.0) == doctest::Approx(0.5 - 0.3 - 0.1 * cost / 100.0));
    CHECK(episode_objective(s, std::vector<double>(c.size(), 0.0), c, 0.1, 100.0) == doctest::Approx(0.2));
}

TEST_CASE("training is reproducible and logs every episode")
{
    const NetworkCase net = shipped();
    const SurrogateModel model = untrained(net);
    const TrainConfig c = tiny();
    std::vector<std::string> a, b;
    const TrainResult r1 = run_training(net, model, c, {[&](const EpisodeLog& e) { a.push_back(format_episode(e)); }});
    const TrainResult r2 = run_training(net, model, c, {[&](const EpisodeLog& e) { b.push_back(format_episode(e)); }});
    REQUIRE(a.size() == 4);
    CHECK(a == b);
    CHECK(std::isnan(r1.log[0].critic_loss));
    CHECK(std::isfinite(r1.log[2].critic_loss));
    CHECK(std::isfinite(r1.log[3].actor_loss));
    CHECK(std::isfinite(r1.log[1].validation));
    CHECK(std::isnan(r1.log[2].validation));
    CHECK(r1.log[3].buffer == 4 * c.n * c.T);
    CHECK(max_diff(r1.last.actor, r2.last.actor) == 0.0);
}

TEST_CASE("epsilon = 1 makes the target nets equal the online nets after one update")
{
    const NetworkCase net = shipped();
    const SurrogateModel model = untrained(net);
    TrainConfig c = tiny();
    c.E = 3;
    c.epsilon = 1.0;
    c.checkpoint_every = 1;
    int seen = 0;
    TrainCallbacks cb;
    cb.on_checkpoint = [&](const TrainingState& st, bool) {
        ++seen;
        if (st.episode == 3) {
            CHECK(max_diff(st.online.actor, st.target.actor) == 0.0);
            CHECK(max_diff(st.online.critic, st.target.critic) == 0.0);
            CHECK(max_diff(st.online.conv, st.target.conv) == 0.0);
        }
        if (st.episode == 1) CHECK(st.learner_steps == 0);
    };
    run_training(net, model, c, cb);
    CHECK(seen == 3);
}

TEST_CASE("checkpoints round-trip the training state and resume continues the episode count")
{
    const NetworkCase net = shipped();
    const SurrogateModel model = untrained(net);
    TrainConfig c = tiny();
    const auto dir = std::filesystem::temp_directory_path() / "gd2rl_test_ckpt";
    std::filesystem::remove_all(dir);
    TrainingState saved;
    TrainCallbacks cb;
    cb.on_checkpoint = [&](const TrainingState& st, bool) {
        if (st.episode == 2) {
            save_checkpoint(dir.string(), st, c);
            saved = st;
        }
    };
    run_training(net, model, c, cb);
    const TrainingState back = load_checkpoint(dir.string(), c);
    CHECK(back.episode == 2);
    CHECK(back.learner_steps == saved.learner_steps);
    CHECK(back.best_validation == saved.best_validation);
    CHECK(max_diff(back.online.actor, saved.online.actor) == 0.0);
    CHECK(max_diff(back.target.critic, saved.target.critic) == 0.0);
    std::vector<std::size_t> episodes;
    run_training(net, model, c, {[&](const EpisodeLog& e) { episodes.push_back(e.episode); }}, &back);
    CHECK(episodes == std::vector<std::size_t>{3, 4});
    const AgentNets inf = load_agent(dir.string(), c.agent_config());
    CHECK(max_diff(inf.actor, saved.online.actor) == 0.0);
    CHECK_THROWS(load_agent((dir / "missing").string(), c.agent_config()));
    std::filesystem::remove_all(dir);
}
