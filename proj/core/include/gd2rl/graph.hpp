#pragma once

#include <array>
#include <vector>

#include "gd2rl/power_flow.hpp"
#include "gd2rl/tensor.hpp"

namespace gd2rl {

enum class NodeType { Gen, Other };
enum class EdgeType { Gen2Other, Other2Gen, Other2Other, ReverseGen2Other, ReverseOther2Gen };
inline constexpr std::size_t kEdgeTypes = 5;

inline constexpr std::size_t kGenFeatures = 6;    // P_g, P_L, Q_g, Q_L, V, theta
inline constexpr std::size_t kOtherFeatures = 4;  // P_L, Q_L, V, theta
inline constexpr std::size_t kEdgeFeatures = 3;   // P_e, Q_e, F

const char* edge_type_name(EdgeType t);

/// Node roster and directed edge list of a case. The topology is the same
/// for every state and contingency of the case, so it is built once.
struct GraphTemplate {
    std::vector<std::size_t> gen_buses;    // bus indices of gen-nodes
    std::vector<std::size_t> other_buses;  // bus indices of other-nodes
    std::vector<NodeType> bus_type;        // per bus index
    std::vector<std::size_t> bus_slot;     // position inside its type list
    std::vector<std::size_t> generator_node;  // gen-node slot of each generator

    struct Edge {
        std::size_t element = 0;  // index into NetworkCase::elements()
        bool forward = true;      // from -> to of the element
        std::size_t src = 0;      // bus indices
        std::size_t dst = 0;
        EdgeType type = EdgeType::Other2Other;
    };
    std::vector<Edge> edges;

    std::size_t gen_count() const { return gen_buses.size(); }
    std::size_t other_count() const { return other_buses.size(); }
    std::size_t edge_count() const { return edges.size(); }
    /// Length of the flattened raw feature vector (gen, other, edge blocks).
    std::size_t feature_length() const;
};

GraphTemplate make_graph_template(const NetworkCase& net);

/// Node and edge features of one state, unnormalized unless stated.
struct HeteroGraph {
    Matrix gen_x;    // gen_count x 6
    Matrix other_x;  // other_count x 4
    Matrix edge_x;   // edge_count x 3
    bool normalized = false;

    std::vector<double> flatten() const;
    static HeteroGraph unflatten(const GraphTemplate& tpl, const double* data);
};

/// Per-column z-score statistics of every feature except the fault flag.
struct NormStats {
    ZScore gen;
    ZScore other;
    ZScore edge;  // P_e, Q_e only

    bool empty() const { return gen.mean.empty(); }
};

HeteroGraph build_graph(const GraphTemplate& tpl, const NetworkCase& net, const OperatingState& state,
                        const PowerFlowSolution& solution, const Contingency& contingency);

/// Same as above followed by normalize().
HeteroGraph build_graph(const GraphTemplate& tpl, const NetworkCase& net, const OperatingState& state,
                        const PowerFlowSolution& solution, const Contingency& contingency, const NormStats& stats);

/// Raw features of a state with the fault flag moved to another branch.
void set_fault_flag(const GraphTemplate& tpl, const NetworkCase& net, HeteroGraph& graph, const Contingency& contingency);

NormStats fit_norm_stats(const std::vector<HeteroGraph>& graphs);
void normalize(HeteroGraph& graph, const NormStats& stats);

}  // namespace gd2rl
