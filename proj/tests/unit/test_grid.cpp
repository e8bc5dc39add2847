#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gd2rl/grid.hpp"
#include "toy_cases.hpp"

using namespace gd2rl;
using gd2rl::testing::shipped;
using gd2rl::testing::three_bus;

namespace {

double total_load(const OperatingState& s) { return std::accumulate(s.load_p.begin(), s.load_p.end(), 0.0); }

BaseStateOptions no_perturbation() { return BaseStateOptions{0.0, 0.0, 0.0, 0.03}; }

}  // namespace

TEST_CASE("shipped case has the modified 39-bus roster")
{
    const NetworkCase net = shipped();
    CHECK(net.buses.size() == 39);
    CHECK(net.branches.size() == 34);
    CHECK(net.generators.size() == 10);
    CHECK(net.pv_units.size() == 2);
    CHECK(net.base_mva == 100.0);
    CHECK(net.generators[1].bus == 31);
    CHECK(net.buses[net.slack_bus()].id == 31);
    CHECK(net.slack_generator() == 1);
    CHECK(net.pv_units[0].bus == 37);
    CHECK(net.pv_units[1].bus == 38);
    CHECK(net.generators[6].cost == 1.0);
    CHECK(net.generators[9].cost == 2.0);
    const double table[10] = {6, 0, 4.5, 9, 9, 6, 1, 5, 6, 2};
    for (int g = 0; g < 10; ++g) CHECK(net.generators[g].cost == table[g]);
    CHECK(net.adjustable().size() == 9);
    CHECK_FALSE(net.branches[net.line_position(22)].faultable);
    CHECK(net.faultable_lines().size() == 33);
    CHECK_FALSE(net.connected_without(net.line_element(22)));
    for (int id : net.faultable_lines()) CHECK(net.connected_without(net.line_element(id)));
}

TEST_CASE("case validation and parse errors name the record")
{
    std::string text = gd2rl::testing::kThreeBusCase;
    const auto pos = text.find("2 pv 1.00");
    std::string two_slack = text;
    two_slack.replace(pos, 4, "2 slack");
    CHECK_THROWS_AS(parse_case(two_slack), ValidationError);

    std::string malformed = text;
    malformed.replace(malformed.find("0.01 0.10 0.02 1"), 16, "0.01 abc 0.02 1");
    try {
        parse_case(malformed, "bad.case");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("bad.case") != std::string::npos);
        CHECK(std::string(e.what()).find("'x'") != std::string::npos);
    }

    std::string zero_x = text;
    zero_x.replace(zero_x.find("1 1 2 0.01 0.10"), 15, "1 1 2 0.01 0.00");
    CHECK_THROWS_AS(parse_case(zero_x), ValidationError);

    std::string adjustable_slack = text;
    adjustable_slack.replace(adjustable_slack.find("1 100 0 500 5.0 0.10 1.0 0 0"), 28, "1 100 0 500 5.0 0.10 1.0 0 1");
    CHECK_THROWS_AS(parse_case(adjustable_slack), ValidationError);

    CHECK_THROWS_AS(load_case("/nonexistent/file.case"), ParseError);
}

TEST_CASE("case text round-trips")
{
    const NetworkCase net = shipped();
    const NetworkCase again = parse_case(format_case(net));
    CHECK(format_case(again) == format_case(net));
    CHECK(again.buses.size() == net.buses.size());
    CHECK(again.generators[3].h == net.generators[3].h);
}

TEST_CASE("zero-perturbation base state at level 1.0 reproduces the case")
{
    const NetworkCase net = shipped();
    Rng rng(1);
    const OperatingState s = sample_base_state(net, 1.0, rng, no_perturbation());
    const OperatingState nominal = nominal_state(net);
    for (std::size_t g = 0; g < s.gen_p.size(); ++g) CHECK(s.gen_p[g] == doctest::Approx(nominal.gen_p[g]).epsilon(1e-9));
    CHECK(s.load_p == nominal.load_p);
    CHECK(s.pv_p == nominal.pv_p);
    CHECK(s.gen_v == nominal.gen_v);
}

TEST_CASE("stress level 1.2 keeps every load inside the perturbation band")
{
    const NetworkCase net = shipped();
    const OperatingState nominal = nominal_state(net);
    Rng rng(7);
    for (int draw = 0; draw < 50; ++draw) {
        const OperatingState s = sample_base_state(net, 1.2, rng);
        for (std::size_t i = 0; i < s.load_p.size(); ++i) {
            if (nominal.load_p[i] == 0.0) continue;
            const double ratio = s.load_p[i] / nominal.load_p[i];
            CHECK(ratio >= 1.08 - 1e-12);
            CHECK(ratio <= 1.32 + 1e-12);
        }
        const double gen = net_injection(s) + total_load(s);
        CHECK(gen == doctest::Approx(1.03 * total_load(s)).epsilon(1e-9));
    }
}

TEST_CASE("load perturbation has zero mean")
{
    const NetworkCase net = shipped();
    const OperatingState nominal = nominal_state(net);
    Rng rng(11);
    double sum = 0.0;
    std::size_t count = 0;
    for (int draw = 0; draw < 1000; ++draw) {
        const OperatingState s = sample_base_state(net, 1.0, rng);
        for (std::size_t i = 0; i < s.load_p.size(); ++i) {
            if (nominal.load_p[i] == 0.0) continue;
            sum += s.load_p[i] / nominal.load_p[i] - 1.0;
            ++count;
        }
    }
    CHECK(std::abs(sum / static_cast<double>(count)) < 0.01);
}

TEST_CASE("rebalance splits in proportion to current outputs")
{
    const NetworkCase net = three_bus();
    OperatingState s = nominal_state(net);
    s.gen_p = {100, 100, 200};
    rebalance_adjustable(net, s, -30.0);
    CHECK(s.gen_p[1] == doctest::Approx(90.0));
    CHECK(s.gen_p[2] == doctest::Approx(180.0));
    CHECK(s.gen_p[0] == 100.0);

    s.gen_p = {100, 100, 300};
    rebalance_adjustable(net, s, -30.0);
    CHECK(s.gen_p[1] == doctest::Approx(92.5));
    CHECK(s.gen_p[2] == doctest::Approx(277.5));

    // Clamp refusal lands on the slack.
    s.gen_p = {100, 390, 390};
    rebalance_adjustable(net, s, 40.0);
    CHECK(s.gen_p[1] == 400.0);
    CHECK(s.gen_p[2] == 400.0);
    CHECK(s.gen_p[0] == doctest::Approx(120.0));
}

TEST_CASE("scenario sampling")
{
    const NetworkCase net = shipped();
    Rng rng(3);
    const OperatingState base = sample_base_state(net, 1.0, rng);
    const Contingency c{5, 0.5, 0.1};

    SUBCASE("m samples, power balance preserved, truncation respected")
    {
        const ScenarioDistribution sc = sample_scenario(net, base, c, 200, rng);
        CHECK(sc.samples.size() == 200);
        for (const auto& s : sc.samples) {
            CHECK(net_injection(s) == doctest::Approx(net_injection(base)).epsilon(1e-12));
            for (std::size_t u = 0; u < s.pv_p.size(); ++u) {
                CHECK(s.pv_p[u] >= 0.0);
                CHECK(s.pv_p[u] <= net.pv_units[u].p_cap);
            }
            CHECK(s.load_p == base.load_p);
            CHECK(s.gen_v == base.gen_v);
        }
    }
    SUBCASE("zero sigma gives identical samples")
    {
        NetworkCase flat = net;
        for (auto& pv : flat.pv_units) pv.sigma = 0.0;
        const ScenarioDistribution sc = sample_scenario(flat, base, c, 5, rng);
        for (const auto& s : sc.samples) CHECK(s == base);
    }
    SUBCASE("fixed seed is bit-reproducible")
    {
        Rng a(99), b(99);
        const auto sa = sample_scenario(net, base, c, 20, a);
        const auto sb = sample_scenario(net, base, c, 20, b);
        for (std::size_t k = 0; k < 20; ++k) CHECK(sa.samples[k] == sb.samples[k]);
    }
    SUBCASE("m = 0 is rejected")
    {
        CHECK_THROWS_AS(sample_scenario(net, base, c, 0, rng), ValidationError);
    }
}

TEST_CASE("truncated normal stays inside [0, cap] even far from the mean")
{
    NetworkCase net = three_bus();
    net.pv_units[0].p_mean = 95;
    net.pv_units[0].sigma = 50;
    OperatingState base = nominal_state(net);
    base.pv_p[0] = 95;
    Rng rng(5);
    const auto sc = sample_scenario(net, base, Contingency::none(), 2000, rng);
    for (const auto& s : sc.samples) {
        CHECK(s.pv_p[0] >= 0.0);
        CHECK(s.pv_p[0] <= 100.0);
    }
}

TEST_CASE("apply_redispatch")
{
    const NetworkCase net = shipped();
    const OperatingState s = nominal_state(net);
    CHECK(apply_redispatch(net, s, std::vector<double>(9, 0.0)) == s);

    std::vector<double> a(9, 0.0);
    a[0] = 1e6;
    const OperatingState pinned = apply_redispatch(net, s, a);
    CHECK(pinned.gen_p[0] == net.generators[0].p_max);

    std::vector<double> ones(9, 25.0);
    const OperatingState moved = apply_redispatch(net, s, ones);
    CHECK(moved.gen_p[1] == s.gen_p[1]);
    CHECK(moved.pv_p == s.pv_p);

    double prev = -1e9;
    for (double step = -100; step <= 100; step += 10) {
        std::vector<double> b(9, 0.0);
        b[2] = step;
        const double out = apply_redispatch(net, s, b).gen_p[net.adjustable()[2]];
        CHECK(out >= prev);
        prev = out;
    }
    CHECK_THROWS_AS(apply_redispatch(net, s, std::vector<double>(8, 0.0)), ValidationError);
}

TEST_CASE("contingency validation")
{
    const NetworkCase net = shipped();
    CHECK_NOTHROW(validate_contingency(net, Contingency{1, 0.5, 0.1}));
    CHECK_THROWS_AS(validate_contingency(net, Contingency{22, 0.5, 0.1}), ValidationError);
    CHECK_THROWS_AS(validate_contingency(net, Contingency{1, 1.0, 0.1}), ValidationError);
    CHECK_THROWS_AS(validate_contingency(net, Contingency{1, 0.5, 0.0}), ValidationError);
    CHECK_THROWS_AS(validate_contingency(net, Contingency{99, 0.5, 0.1}), ValidationError);
}
