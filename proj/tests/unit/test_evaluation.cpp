#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gd2rl/evaluation.hpp"
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

double total(const CategoricalTsiDistribution& d) { return std::accumulate(d.probs.begin(), d.probs.end(), 0.0); }

}  // namespace

TEST_CASE("PSO finds the minimum of the De Jong sphere within 1e-3 in 50 iterations")
{
    PsoConfig c;
    c.bound = 5.12;
    auto sphere = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return -s;
    };
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const PsoResult r = pso_maximize(sphere, 3, c, rng);
        CHECK(-r.best_value <= 1e-3);
        CHECK(r.evaluations == c.particles * (c.iterations + 1));
        REQUIRE(r.history.size() == c.iterations);
        for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i] >= r.history[i - 1]);
    }
}

TEST_CASE("PSO stays in bounds and is deterministic given the rng")
{
    PsoConfig c;
    c.iterations = 10;
    std::vector<std::vector<double>> seen;
    auto f = [&](const std::vector<double>& x) {
        seen.push_back(x);
        return x[0] - x[1];
    };
    Rng r1(9), r2(9);
    const PsoResult a = pso_maximize(f, 2, c, r1);
    for (const auto& x : seen)
        for (double v : x) CHECK(std::abs(v) <= c.bound);
    const PsoResult b = pso_maximize(f, 2, c, r2);
    CHECK(a.best == b.best);
    CHECK(a.best[0] > 200.0);
    CHECK(a.best[1] < -200.0);
    c.particles = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("distribution shift preserves mass and adds means away from the clip")
{
    CategoricalTsiDistribution pre, change, zero;
    two_hot_add(pre, 0.1, 0.5);
    two_hot_add(pre, -0.3, 0.5);
    two_hot_add(change, 0.2, 0.25);
    two_hot_add(change, 0.05, 0.75);
    two_hot_add(zero, 0.0, 1.0);
    const auto s = shift_distribution(pre, change);
    CHECK(total(s) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.mean() == doctest::Approx(pre.mean() + change.mean()).epsilon(1e-12));
    const auto id = shift_distribution(pre, zero);
    for (std::size_t i = 0; i < kAtoms; ++i) CHECK(id.probs[i] == doctest::Approx(pre.probs[i]));
    CategoricalTsiDistribution big;
    two_hot_add(big, 1.0, 1.0);
    const auto clipped = shift_distribution(pre, big);
    CHECK(clipped.probs[kAtoms - 1] == doctest::Approx(0.5));
    CHECK(clipped.mean() == doctest::Approx(0.5 * 1.0 + 0.5 * 0.7));
}

TEST_CASE("histograms and stable shares treat diverged samples as unstable and excluded")
{
    const double nan = std::nan("");
    CHECK(stable_share({0.5, -0.1, nan, 0.2}) == doctest::Approx(0.5));
    CHECK(stable_share({}) == 0.0);
    const auto h = tsi_histogram({0.5, nan, -0.5});
    CHECK(total(h) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h.mean() == doctest::Approx(0.0).epsilon(1e-12));
    const auto all = tsi_histogram({nan, nan});
    CHECK(all.probs[0] == 1.0);
}

TEST_CASE("hard pool scenarios have a truly unstable base and are reproducible")
{
    const NetworkCase net = shipped();
    const auto a = hard_pool(net, 2, 3, 5);
    const auto b = hard_pool(net, 2, 3, 5);
    REQUIRE(a.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
        CHECK(a[k].level >= 1.1 - 1e-9);
        CHECK(a[k].samples.size() == 3);
        CHECK(a[k].samples[1].load_p == b[k].samples[1].load_p);
        const PowerFlowSolution sol = solve_power_flow(net, a[k].base);
        REQUIRE(sol.converged);
        CHECK(tsi(simulate(net, sol, a[k].contingency)) <= 0.0);
    }
    const auto m = mixed_pool(net, 3, 2, 5);
    CHECK(m.size() == 3);
}

TEST_CASE("zero policy keeps the pre-control confidence and reports round-trip")
{
    const NetworkCase net = shipped();
    const SurrogateModel model = untrained(net);
    const auto pool = mixed_pool(net, 3, 4, 11);
    EvaluationOptions o;
    o.policy = PolicyKind::Zero;
    o.threads = 2;
    const EvaluationReport z = evaluate_policy(net, model, nullptr, pool, o);
    REQUIRE(z.scenarios.size() == 3);
    for (const auto& r : z.scenarios) {
        CHECK(r.post_confidence == r.pre_confidence);
        CHECK(r.cost == 0.0);
        CHECK(r.pre_confidence >= 0.0);
        CHECK(r.pre_confidence <= 100.0);
        CHECK(total(r.pre_hist) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(z.mean_post() == z.mean_pre());

    o.policy = PolicyKind::Random;
    const EvaluationReport r = evaluate_policy(net, model, nullptr, pool, o);
    const auto costs = adjustable_costs(net);
    for (const auto& s : r.scenarios) {
        double expect = 0.0;
        for (std::size_t g = 0; g < costs.size(); ++g) expect += costs[g] * std::abs(s.action[g]);
        CHECK(std::abs(s.cost - expect) < 0.005);
        for (double a : s.action) CHECK(std::abs(a) <= 5 * 50.0 + 1e-9);
        const Table h = parse_table(format_histograms(s));
        REQUIRE(h.rows.size() == kAtoms);
        double pre = 0.0, crit = 0.0, post = 0.0;
        for (std::size_t i = 0; i < kAtoms; ++i) {
            pre += h.number(i, "pre");
            crit += h.number(i, "critic");
            post += h.number(i, "post");
        }
        CHECK(pre == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(crit == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(post == doctest::Approx(1.0).epsilon(1e-9));
    }
    const Table t = parse_table(format_report(r));
    REQUIRE(t.rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(t.number(i, "post_confidence") == r.scenarios[i].post_confidence);
        CHECK(t.number(i, "cost") == r.scenarios[i].cost);
        CHECK(t.number(i, "a1") == r.scenarios[i].action[0]);
    }
    const Table f = parse_table(format_fault_table(r));
    std::size_t n = 0;
    for (std::size_t i = 0; i < f.rows.size(); ++i) n += static_cast<std::size_t>(f.number(i, "scenarios"));
    CHECK(n == 3);
    const EvaluationReport r2 = evaluate_policy(net, model, nullptr, pool, o);
    CHECK(format_report(r2).substr(0, 80) == format_report(r).substr(0, 80));
    CHECK_THROWS_AS(evaluate_policy(net, model, nullptr, pool, EvaluationOptions{}), std::invalid_argument);
}

TEST_CASE("comparison rows round-trip and the smoothed curve is non-decreasing")
{
    std::vector<ComparisonRow> rows{{"distrl", 10, 1, 40.0, 50.0, 1.0}, {"scalar", 10, 1, 35.0, 40.0, 1.0},
                                    {"distrl", 25, 1, 38.0, 55.5, 2.0}, {"distrl", 50, 1, 60.0, 70.0, 3.0},
                                    {"distrl", 50, 2, 50.0, 70.0, 3.0}};
    const auto back = parse_comparison(format_comparison(rows));
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].method == rows[i].method);
        CHECK(back[i].budget == rows[i].budget);
        CHECK(back[i].seed == rows[i].seed);
        CHECK(back[i].confidence == rows[i].confidence);
        CHECK(back[i].cost == rows[i].cost);
    }
    const auto curve = monotone_curve(rows, "distrl");
    REQUIRE(curve.size() == 3);
    CHECK(curve[0].second == 40.0);
    CHECK(curve[1].second == 40.0);
    CHECK(curve[2].second == 55.0);
    CHECK_THROWS_AS(parse_table("a b\n1 2 3\n"), std::invalid_argument);
}

TEST_CASE("PSO on an already stable scenario returns a near-zero action")
{
    const NetworkCase net = shipped();
    Rng rng(3);
    ScenarioDistribution sc;
    for (;;) {
        const OperatingState base = sample_base_state(net, 0.9, rng);
        sc = sample_scenario(net, base, Contingency{net.faultable_lines().front(), 0.5, 0.1}, 1, rng);
        if (stable_share(true_tsi(net, sc, std::vector<double>(9, 0.0))) == 1.0) break;
    }
    const PsoConfig c;
    const PsoRedispatch r = pso_redispatch(net, nullptr, sc, FitnessBackend::TrueSim, c, 0.1, 100.0, rng);
    CHECK(r.confidence == 100.0);
    double sum = 0.0;
    for (double a : r.search.best) sum += std::abs(a);
    MESSAGE("total |a| " << sum << " MW, cost " << r.cost << " $");
    CHECK(sum < 0.1 * 9 * c.bound);
    CHECK(r.cost < 100.0);
}
