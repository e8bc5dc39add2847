#include <benchmark/benchmark.h>

#include "gd2rl/evaluation.hpp"
#include "gd2rl/power_flow.hpp"

using namespace gd2rl;

namespace {

struct Fixture {
    NetworkCase net = load_case(shipped_case_path());
    OperatingState state;
    PowerFlowSolution solution;
    Contingency contingency;
    SurrogateModel model;
    HeteroGraph graph;

    Fixture()
    {
        Rng rng(2);
        state = sample_base_state(net, 1.0, rng);
        solution = solve_power_flow(net, state);
        contingency = Contingency{net.faultable_lines().front(), 0.5, 0.1};
        model = SurrogateModel::create(net, SimConfig{}.points(), {}, rng);
        const HeteroGraph raw = build_graph(model.tpl, net, state, solution, contingency);
        model.stats = fit_norm_stats({raw});
        graph = prepare_graph(model, raw);
    }
};

Fixture& fixture()
{
    static Fixture f;
    return f;
}

void BM_PowerFlow(benchmark::State& st)
{
    auto& f = fixture();
    for (auto _ : st) benchmark::DoNotOptimize(solve_power_flow(f.net, f.state));
}
BENCHMARK(BM_PowerFlow)->Unit(benchmark::kMicrosecond);

void BM_Simulate(benchmark::State& st)
{
    auto& f = fixture();
    for (auto _ : st) benchmark::DoNotOptimize(simulate(f.net, f.solution, f.contingency));
}
BENCHMARK(BM_Simulate)->Unit(benchmark::kMillisecond);

void BM_PredictCurves(benchmark::State& st)
{
    auto& f = fixture();
    const std::vector<HeteroGraph> graphs(static_cast<std::size_t>(st.range(0)), f.graph);
    const Precision p = st.range(1) ? Precision::Double : Precision::Single;
    for (auto _ : st) benchmark::DoNotOptimize(predict_curves(f.model, graphs, p));
    st.SetItemsProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_PredictCurves)->Args({1, 0})->Args({1000, 0})->Args({1000, 1})->Unit(benchmark::kMillisecond);

void BM_EnvObserve(benchmark::State& st)
{
    auto& f = fixture();
    RedispatchEnv env(f.net, f.model);
    const auto pool = mixed_pool(f.net, 1, static_cast<std::size_t>(st.range(0)), 3);
    for (auto _ : st) benchmark::DoNotOptimize(env.observe(pool.front()));
}
BENCHMARK(BM_EnvObserve)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_LearnerStep(benchmark::State& st)
{
    Rng rng(4);
    TrainConfig c = TrainConfig::desk();
    AgentNets online = AgentNets::create(c.agent_config(), rng);
    AgentNets target = online;
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<Transition> batch(c.M);
    for (auto& t : batch) {
        Matrix s(static_cast<Eigen::Index>(c.samples), static_cast<Eigen::Index>(c.agent_config().state_width));
        for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = n(rng);
        t.state = std::make_shared<Matrix>(s);
        t.next_state = t.state;
        t.action.assign(c.agent_config().actions, 10.0);
        t.tsi_rewards.assign(c.samples, 0.1);
    }
    std::vector<const Transition*> ptrs;
    for (const auto& t : batch) ptrs.push_back(&t);
    const std::vector<double> cost(c.agent_config().actions, 5.0);
    for (auto _ : st) {
        online.conv.zero_grad();
        online.critic.zero_grad();
        online.actor.zero_grad();
        Tape t1;
        t1.backward(critic_loss(t1, online, target, ptrs, c.gamma).total);
        Tape t2;
        t2.backward(actor_loss(t2, online, ptrs, cost, c.mu, c.cost_base));
    }
}
BENCHMARK(BM_LearnerStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
