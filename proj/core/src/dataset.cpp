#include "gd2rl/dataset.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

namespace gd2rl {

std::size_t DatasetProtocol::target_records(const NetworkCase& net) const
{
    const std::size_t faults_n = faults.empty() ? net.faultable_lines().size() : faults.size();
    return levels.size() * samples_per_level * faults_n;
}

HeteroGraph Dataset::graph(const GraphTemplate& tpl, std::size_t record) const
{
    return HeteroGraph::unflatten(tpl, records.at(record).features.data());
}

double quantize9(double x)
{
    if (!std::isfinite(x)) return x;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return std::strtod(buf, nullptr);
}

namespace {

struct BaseJob {
    std::uint64_t scenario_id;
    double level;
};

std::vector<DatasetRecord> run_job(const NetworkCase& net, const GraphTemplate& tpl, const DatasetProtocol& protocol,
                                   const std::vector<int>& faults, const BaseJob& job, std::uint64_t seed,
                                   std::size_t& skipped)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(job.scenario_id), 0x6473u};
    Rng rng(seq);
    OperatingState state;
    PowerFlowSolution sol;
    for (std::size_t attempt = 0;; ++attempt) {
        if (attempt > protocol.max_redraws)
            throw std::runtime_error("scenario " + std::to_string(job.scenario_id) + ": power flow diverged " +
                                     std::to_string(attempt) + " times");
        state = sample_base_state(net, job.level, rng, protocol.base);
        sol = solve_power_flow(net, state);
        if (sol.converged) break;
        ++skipped;
    }
    std::vector<DatasetRecord> out;
    HeteroGraph graph = build_graph(tpl, net, state, sol, Contingency::none());
    for (int fault : faults) {
        const Contingency c{fault, 0.5, 0.1};
        set_fault_flag(tpl, net, graph, c);
        const AngleCurveSet curves = simulate(net, sol, c, protocol.sim);
        DatasetRecord r;
        r.scenario_id = job.scenario_id;
        r.level = quantize9(job.level);
        r.fault_branch = fault;
        r.features = graph.flatten();
        for (double& v : r.features) v = quantize9(v);
        r.labels.resize(curves.angles.size());
        for (std::size_t k = 0; k < curves.angles.size(); ++k) r.labels[k] = quantize9(forward_transform(curves.angles[k]));
        const double t = tsi(curves);
        r.tsi = quantize9(t);
        r.stable = t > 0.0;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

Dataset generate_dataset(const NetworkCase& net, const DatasetProtocol& protocol, std::uint64_t seed,
                         const ProgressFn& log)
{
    const GraphTemplate tpl = make_graph_template(net);
    const std::vector<int> faults = protocol.faults.empty() ? net.faultable_lines() : protocol.faults;
    for (int f : faults) validate_contingency(net, Contingency{f, 0.5, 0.1});

    std::vector<BaseJob> jobs;
    for (std::size_t l = 0; l < protocol.levels.size(); ++l)
        for (std::size_t s = 0; s < protocol.samples_per_level; ++s)
            jobs.push_back({static_cast<std::uint64_t>(jobs.size()), protocol.levels[l]});

    std::vector<std::vector<DatasetRecord>> results(jobs.size());
    std::vector<std::size_t> skipped(jobs.size(), 0);
    const std::size_t workers = std::max<std::size_t>(1, std::min(protocol.threads, jobs.size()));
    std::vector<std::exception_ptr> errors(workers);
    auto worker = [&](std::size_t w) {
        try {
            for (std::size_t j = w; j < jobs.size(); j += workers) {
                results[j] = run_job(net, tpl, protocol, faults, jobs[j], seed, skipped[j]);
                if (log && w == 0 && (j / workers) % 10 == 0)
                    log("base state " + std::to_string(j + 1) + "/" + std::to_string(jobs.size()));
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (workers == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    Dataset data;
    data.gen_nodes = tpl.gen_count();
    data.other_nodes = tpl.other_count();
    data.edges = tpl.edge_count();
    data.generators = net.generators.size();
    data.points = protocol.sim.points();
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        data.skipped_draws += skipped[j];
        for (auto& r : results[j]) data.records.push_back(std::move(r));
    }
    if (log && data.skipped_draws > 0)
        log("redrew " + std::to_string(data.skipped_draws) + " base states whose power flow diverged");
    return data;
}

namespace {

constexpr const char* kGenNames[] = {"p_g", "p_l", "q_g", "q_l", "v", "theta"};
constexpr const char* kOtherNames[] = {"p_l", "q_l", "v", "theta"};
constexpr const char* kEdgeNames[] = {"p_e", "q_e", "f"};

std::string header(const Dataset& d)
{
    std::ostringstream h;
    h << "scenario_id,level,fault_branch";
    for (std::size_t k = 0; k < d.gen_nodes; ++k)
        for (const char* n : kGenNames) h << ",gen" << k << "_" << n;
    for (std::size_t k = 0; k < d.other_nodes; ++k)
        for (const char* n : kOtherNames) h << ",other" << k << "_" << n;
    for (std::size_t k = 0; k < d.edges; ++k)
        for (const char* n : kEdgeNames) h << ",edge" << k << "_" << n;
    for (std::size_t g = 0; g < d.generators; ++g)
        for (std::size_t t = 0; t < d.points; ++t) h << ",y_g" << g + 1 << "_t" << t + 1;
    h << ",tsi,stable";
    return h.str();
}

std::size_t count_prefix(const std::vector<std::string>& cols, const std::string& prefix, const std::string& suffix)
{
    std::size_t n = 0;
    for (const auto& c : cols)
        if (c.rfind(prefix, 0) == 0 && c.size() >= suffix.size() && c.compare(c.size() - suffix.size(), suffix.size(), suffix) == 0)
            ++n;
    return n;
}

}  // namespace

void write_dataset(const Dataset& data, const std::string& path)
{
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "w"), &std::fclose);
    if (!f) throw std::runtime_error("cannot write " + path);
    std::fprintf(f.get(), "%s\n", header(data).c_str());
    for (const auto& r : data.records) {
        if (r.features.size() != data.feature_length() || r.labels.size() != data.label_length())
            throw std::runtime_error("record " + std::to_string(r.scenario_id) + " has inconsistent lengths");
        std::fprintf(f.get(), "%" PRIu64 ",%.9g,%d", r.scenario_id, r.level, r.fault_branch);
        for (double v : r.features) std::fprintf(f.get(), ",%.9g", v);
        for (double v : r.labels) std::fprintf(f.get(), ",%.9g", v);
        std::fprintf(f.get(), ",%.9g,%d\n", r.tsi, r.stable ? 1 : 0);
    }
    if (std::ferror(f.get())) throw std::runtime_error("write error on " + path);
}

Dataset read_dataset(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty dataset file");
    std::vector<std::string> cols;
    {
        std::istringstream hs(line);
        std::string c;
        while (std::getline(hs, c, ',')) cols.push_back(c);
    }
    Dataset d;
    d.gen_nodes = count_prefix(cols, "gen", "_theta");
    d.other_nodes = count_prefix(cols, "other", "_theta");
    d.edges = count_prefix(cols, "edge", "_f");
    d.points = count_prefix(cols, "y_g1_", "");
    d.generators = d.points ? count_prefix(cols, "y_g", "_t1") : 0;
    const std::size_t expected = 3 + d.feature_length() + d.label_length() + 2;
    if (cols.size() != expected || header(d) != line) throw ParseError(path + ": unrecognized dataset header");

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const char* p = line.c_str();
        char* end = nullptr;
        auto next = [&](const char* what) {
            const double v = std::strtod(p, &end);
            if (end == p) throw ParseError(path + ":" + std::to_string(line_no) + ": malformed " + what);
            p = end;
            if (*p == ',') ++p;
            return v;
        };
        DatasetRecord r;
        r.scenario_id = static_cast<std::uint64_t>(next("scenario_id"));
        r.level = next("level");
        r.fault_branch = static_cast<int>(next("fault_branch"));
        r.features.resize(d.feature_length());
        for (auto& v : r.features) v = next("feature");
        r.labels.resize(d.label_length());
        for (auto& v : r.labels) v = next("label");
        r.tsi = next("tsi");
        r.stable = next("stable") != 0.0;
        if (*end != '\0') throw ParseError(path + ":" + std::to_string(line_no) + ": trailing fields");
        d.records.push_back(std::move(r));
    }
    return d;
}

DatasetSplit split_dataset(const Dataset& data, std::uint64_t seed, double train, double validation)
{
    std::map<std::uint64_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < data.records.size(); ++i) groups[data.records[i].scenario_id].push_back(i);
    std::vector<std::uint64_t> ids;
    for (const auto& [id, _] : groups) ids.push_back(id);
    Rng rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = ids.size();
    const auto n_train = static_cast<std::size_t>(std::llround(train * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(validation * static_cast<double>(n)));
    DatasetSplit s;
    for (std::size_t k = 0; k < n; ++k) {
        auto& dst = k < n_train ? s.train : (k < n_train + n_val ? s.validation : s.test);
        for (auto i : groups[ids[k]]) dst.push_back(i);
    }
    return s;
}

}  // namespace gd2rl
