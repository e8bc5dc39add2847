#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gd2rl/graph.hpp"
#include "gd2rl/transient.hpp"

namespace gd2rl {

struct DatasetProtocol {
    std::vector<double> levels = stress_levels();
    std::size_t samples_per_level = 10;
    std::vector<int> faults;  // empty: every faultable line
    SimConfig sim;
    BaseStateOptions base;
    std::size_t threads = 1;
    std::size_t max_redraws = 100;  // per base state, for diverged power flows

    static DatasetProtocol desk() { return {}; }
    static DatasetProtocol paper()
    {
        DatasetProtocol p;
        p.samples_per_level = 500;
        return p;
    }
    std::size_t target_records(const NetworkCase& net) const;
};

/// One (state, contingency) pair. Features are raw (unnormalized) and laid
/// out as HeteroGraph::flatten(); labels are transformed angles,
/// generator-major. Every float is stored rounded to 9 significant digits.
struct DatasetRecord {
    std::uint64_t scenario_id = 0;
    double level = 1.0;
    int fault_branch = 0;
    std::vector<double> features;
    std::vector<double> labels;
    double tsi = 0.0;
    bool stable = true;

    bool operator==(const DatasetRecord&) const = default;
};

struct Dataset {
    std::size_t gen_nodes = 0;
    std::size_t other_nodes = 0;
    std::size_t edges = 0;
    std::size_t generators = 0;
    std::size_t points = 0;
    std::vector<DatasetRecord> records;
    std::size_t skipped_draws = 0;  // diverged power flows that were redrawn

    std::size_t feature_length() const { return gen_nodes * kGenFeatures + other_nodes * kOtherFeatures + edges * kEdgeFeatures; }
    std::size_t label_length() const { return generators * points; }
    HeteroGraph graph(const GraphTemplate& tpl, std::size_t record) const;
};

/// Rounds to 9 significant digits so the decimal file form is exact.
double quantize9(double x);

using ProgressFn = std::function<void(const std::string&)>;

Dataset generate_dataset(const NetworkCase& net, const DatasetProtocol& protocol, std::uint64_t seed,
                         const ProgressFn& log = {});

void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);

/// 5:3:2 split of record indices, shuffled with the given seed. Records that
/// share a scenario id land in the same part.
struct DatasetSplit {
    std::vector<std::size_t> train, validation, test;
};
DatasetSplit split_dataset(const Dataset& data, std::uint64_t seed, double train = 0.5, double validation = 0.3);

}  // namespace gd2rl
