#include "gd2rl/graph.hpp"

namespace gd2rl {

const char* edge_type_name(EdgeType t)
{
    switch (t) {
    case EdgeType::Gen2Other: return "gen2other";
    case EdgeType::Other2Gen: return "other2gen";
    case EdgeType::Other2Other: return "other2other";
    case EdgeType::ReverseGen2Other: return "reverse_gen2other";
    case EdgeType::ReverseOther2Gen: return "reverse_other2gen";
    }
    return "?";
}

std::size_t GraphTemplate::feature_length() const
{
    return gen_count() * kGenFeatures + other_count() * kOtherFeatures + edge_count() * kEdgeFeatures;
}

GraphTemplate make_graph_template(const NetworkCase& net)
{
    GraphTemplate tpl;
    const std::size_t n = net.buses.size();
    std::vector<bool> has_gen(n, false);
    for (const auto& g : net.generators) has_gen[net.bus_index(g.bus)] = true;
    tpl.bus_type.resize(n);
    tpl.bus_slot.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (has_gen[i]) {
            tpl.bus_type[i] = NodeType::Gen;
            tpl.bus_slot[i] = tpl.gen_buses.size();
            tpl.gen_buses.push_back(i);
        } else {
            tpl.bus_type[i] = NodeType::Other;
            tpl.bus_slot[i] = tpl.other_buses.size();
            tpl.other_buses.push_back(i);
        }
    }
    for (const auto& g : net.generators) tpl.generator_node.push_back(tpl.bus_slot[net.bus_index(g.bus)]);

    const auto& elements = net.elements();
    for (std::size_t e = 0; e < elements.size(); ++e) {
        const auto& el = elements[e];
        const bool from_gen = tpl.bus_type[el.from] == NodeType::Gen;
        const bool to_gen = tpl.bus_type[el.to] == NodeType::Gen;
        EdgeType fwd = EdgeType::Other2Other;
        EdgeType rev = EdgeType::Other2Other;
        if (from_gen && !to_gen) {
            fwd = EdgeType::Gen2Other;
            rev = EdgeType::ReverseGen2Other;
        } else if (!from_gen && to_gen) {
            fwd = EdgeType::Other2Gen;
            rev = EdgeType::ReverseOther2Gen;
        }
        tpl.edges.push_back({e, true, el.from, el.to, fwd});
        tpl.edges.push_back({e, false, el.to, el.from, rev});
    }
    return tpl;
}

std::vector<double> HeteroGraph::flatten() const
{
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(gen_x.size() + other_x.size() + edge_x.size()));
    out.insert(out.end(), gen_x.data(), gen_x.data() + gen_x.size());
    out.insert(out.end(), other_x.data(), other_x.data() + other_x.size());
    out.insert(out.end(), edge_x.data(), edge_x.data() + edge_x.size());
    return out;
}

HeteroGraph HeteroGraph::unflatten(const GraphTemplate& tpl, const double* data)
{
    HeteroGraph g;
    const auto ng = static_cast<Eigen::Index>(tpl.gen_count());
    const auto no = static_cast<Eigen::Index>(tpl.other_count());
    const auto ne = static_cast<Eigen::Index>(tpl.edge_count());
    g.gen_x = Eigen::Map<const Matrix>(data, ng, static_cast<Eigen::Index>(kGenFeatures));
    data += g.gen_x.size();
    g.other_x = Eigen::Map<const Matrix>(data, no, static_cast<Eigen::Index>(kOtherFeatures));
    data += g.other_x.size();
    g.edge_x = Eigen::Map<const Matrix>(data, ne, static_cast<Eigen::Index>(kEdgeFeatures));
    return g;
}

HeteroGraph build_graph(const GraphTemplate& tpl, const NetworkCase& net, const OperatingState& state,
                        const PowerFlowSolution& solution, const Contingency& contingency)
{
    if (!solution.converged) throw std::invalid_argument("build_graph needs a converged power flow");
    const std::size_t n = net.buses.size();
    std::vector<double> pg(n, 0.0), qg(n, 0.0), pl(state.load_p), ql(state.load_q);
    for (std::size_t g = 0; g < net.generators.size(); ++g) {
        const auto b = net.bus_index(net.generators[g].bus);
        pg[b] += solution.gen_p[g];
        qg[b] += solution.gen_q[g];
    }
    for (std::size_t u = 0; u < net.pv_units.size(); ++u) pl[net.bus_index(net.pv_units[u].bus)] -= state.pv_p[u];

    HeteroGraph graph;
    graph.gen_x.resize(static_cast<Eigen::Index>(tpl.gen_count()), static_cast<Eigen::Index>(kGenFeatures));
    graph.other_x.resize(static_cast<Eigen::Index>(tpl.other_count()), static_cast<Eigen::Index>(kOtherFeatures));
    graph.edge_x.resize(static_cast<Eigen::Index>(tpl.edge_count()), static_cast<Eigen::Index>(kEdgeFeatures));
    for (std::size_t k = 0; k < tpl.gen_count(); ++k) {
        const auto b = tpl.gen_buses[k];
        graph.gen_x.row(static_cast<Eigen::Index>(k)) << pg[b], pl[b], qg[b], ql[b], solution.v_mag[b],
            solution.v_ang[b];
    }
    for (std::size_t k = 0; k < tpl.other_count(); ++k) {
        const auto b = tpl.other_buses[k];
        graph.other_x.row(static_cast<Eigen::Index>(k)) << pl[b], ql[b], solution.v_mag[b], solution.v_ang[b];
    }
    for (std::size_t k = 0; k < tpl.edge_count(); ++k) {
        const auto& e = tpl.edges[k];
        const auto& flow = solution.branch_pq[e.element];
        graph.edge_x(static_cast<Eigen::Index>(k), 0) = e.forward ? flow.p_from : flow.p_to;
        graph.edge_x(static_cast<Eigen::Index>(k), 1) = e.forward ? flow.q_from : flow.q_to;
    }
    set_fault_flag(tpl, net, graph, contingency);
    return graph;
}

HeteroGraph build_graph(const GraphTemplate& tpl, const NetworkCase& net, const OperatingState& state,
                        const PowerFlowSolution& solution, const Contingency& contingency, const NormStats& stats)
{
    HeteroGraph g = build_graph(tpl, net, state, solution, contingency);
    normalize(g, stats);
    return g;
}

void set_fault_flag(const GraphTemplate& tpl, const NetworkCase& net, HeteroGraph& graph, const Contingency& contingency)
{
    const std::size_t faulted =
        contingency.is_none() ? static_cast<std::size_t>(-1) : net.line_element(contingency.branch_id);
    for (std::size_t k = 0; k < tpl.edge_count(); ++k)
        graph.edge_x(static_cast<Eigen::Index>(k), 2) = tpl.edges[k].element == faulted ? 1.0 : 0.0;
}

NormStats fit_norm_stats(const std::vector<HeteroGraph>& graphs)
{
    if (graphs.empty()) throw std::invalid_argument("fit_norm_stats needs at least one graph");
    const auto& first = graphs.front();
    Matrix gen(first.gen_x.rows() * static_cast<Eigen::Index>(graphs.size()), first.gen_x.cols());
    Matrix other(first.other_x.rows() * static_cast<Eigen::Index>(graphs.size()), first.other_x.cols());
    Matrix edge(first.edge_x.rows() * static_cast<Eigen::Index>(graphs.size()), 2);
    for (std::size_t k = 0; k < graphs.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        gen.middleRows(i * first.gen_x.rows(), first.gen_x.rows()) = graphs[k].gen_x;
        other.middleRows(i * first.other_x.rows(), first.other_x.rows()) = graphs[k].other_x;
        edge.middleRows(i * first.edge_x.rows(), first.edge_x.rows()) = graphs[k].edge_x.leftCols(2);
    }
    return NormStats{zscore_fit(gen), zscore_fit(other), zscore_fit(edge)};
}

void normalize(HeteroGraph& graph, const NormStats& stats)
{
    if (graph.normalized) throw std::logic_error("graph already normalized");
    zscore_apply(graph.gen_x, stats.gen);
    zscore_apply(graph.other_x, stats.other);
    Matrix pq = graph.edge_x.leftCols(2);
    zscore_apply(pq, stats.edge);
    graph.edge_x.leftCols(2) = pq;
    graph.normalized = true;
}

}  // namespace gd2rl
