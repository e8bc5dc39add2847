#include "gd2rl/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>

namespace gd2rl {

namespace {

constexpr EdgeType kAllEdgeTypes[] = {EdgeType::Gen2Other, EdgeType::Other2Gen, EdgeType::Other2Other,
                                   EdgeType::ReverseGen2Other, EdgeType::ReverseOther2Gen};
constexpr std::size_t kEdgeTypeCount = kEdgeTypes;
constexpr std::size_t kInferenceChunk = 128;

std::string transform_name(const std::string& type) { return "transform/" + type + "/"; }

void add_dense(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
               const std::string& suffix = "")
{
    ps.add_glorot(prefix + "w" + suffix, static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), rng);
    ps.add(prefix + "b" + suffix, 1, static_cast<Eigen::Index>(out));
}

Var dense(Tape& t, ParameterSet& ps, const std::string& prefix, Var x, const std::string& suffix = "")
{
    return ag::linear(x, t.parameter(ps.at(prefix + "w" + suffix)), t.parameter(ps.at(prefix + "b" + suffix)));
}

/// Single-hidden-layer feature transform.
Var transform(Tape& t, ParameterSet& ps, const std::string& type, Var x)
{
    const std::string p = transform_name(type);
    return ag::relu(dense(t, ps, p, ag::relu(dense(t, ps, p, x, "1")), "2"));
}

std::size_t node_row(const GraphTemplate& tpl, std::size_t batch, std::size_t graph, std::size_t bus)
{
    const std::size_t slot = tpl.bus_slot[bus];
    if (tpl.bus_type[bus] == NodeType::Gen) return graph * tpl.gen_count() + slot;
    return batch * tpl.gen_count() + graph * tpl.other_count() + slot;
}

Matrix labels_matrix(const Dataset& data, const std::vector<std::size_t>& records)
{
    Matrix y(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(data.label_length()));
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& l = data.records[records[i]].labels;
        std::copy(l.begin(), l.end(), y.row(static_cast<Eigen::Index>(i)).data());
    }
    return y;
}

/// Forward passes in chunks over prepared graphs; one row per graph.
Matrix predict_rows(SurrogateModel& model, const std::vector<const HeteroGraph*>& graphs, std::size_t chunk,
                   Precision precision = Precision::Double)
{
    Matrix out;
    SurrogateInference(model, precision, chunk).run(graphs, &out);
    return out;
}

std::vector<HeteroGraph> prepared_graphs(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records)
{
    std::vector<HeteroGraph> gs;
    gs.reserve(records.size());
    for (auto i : records) gs.push_back(prepare_graph(model, data.graph(model.tpl, i)));
    return gs;
}

std::vector<const HeteroGraph*> pointers(const std::vector<HeteroGraph>& gs)
{
    std::vector<const HeteroGraph*> p;
    p.reserve(gs.size());
    for (const auto& g : gs) p.push_back(&g);
    return p;
}

/// Mean squared error between prediction rows and labels of the same records.
double mse_of(const Matrix& pred, const Matrix& labels) { return (pred - labels).squaredNorm() / static_cast<double>(pred.size()); }

}  // namespace

void SurrogateConfig::validate() const
{
    if (embed == 0 || rounds == 0 || head_hidden1 == 0 || head_hidden2 == 0)
        throw ValidationError("surrogate widths and rounds must be positive");
    if (!(output_clamp > 0.0)) throw ValidationError("surrogate output clamp must be positive");
}

SurrogateModel SurrogateModel::create(const NetworkCase& net, std::size_t points, const SurrogateConfig& config, Rng& rng)
{
    config.validate();
    SurrogateModel m;
    m.config = config;
    m.tpl = make_graph_template(net);
    m.generators = net.generators.size();
    m.points = points;
    const std::size_t e = config.embed;
    auto add_transform = [&](const std::string& type, std::size_t in) {
        add_dense(m.params, transform_name(type), in, e, rng, "1");
        add_dense(m.params, transform_name(type), e, e, rng, "2");
    };
    add_transform("gen", kGenFeatures);
    add_transform("other", kOtherFeatures);
    for (auto t : kAllEdgeTypes) add_transform(edge_type_name(t), kEdgeFeatures);
    for (std::size_t k = 0; k < config.rounds; ++k) {
        const std::string r = "round" + std::to_string(k) + "/";
        for (auto t : kAllEdgeTypes) add_dense(m.params, r + "message/" + edge_type_name(t) + "/", 2 * e, e, rng);
        add_dense(m.params, r + "update/gen/", 2 * e, e, rng);
        add_dense(m.params, r + "update/other/", 2 * e, e, rng);
    }
    for (std::size_t g = 0; g < m.generators; ++g) {
        const std::string h = "head" + std::to_string(g) + "/";
        add_dense(m.params, h, 3 * e, config.head_hidden1, rng, "1");
        add_dense(m.params, h, config.head_hidden1, config.head_hidden2, rng, "2");
        add_dense(m.params, h, config.head_hidden2, points, rng, "3");
    }
    return m;
}

BatchLayout BatchLayout::make(const GraphTemplate& tpl, std::size_t batch)
{
    BatchLayout l;
    l.batch = batch;
    std::vector<double> indegree(batch * (tpl.gen_count() + tpl.other_count()), 0.0);
    std::vector<std::size_t> dst;
    std::vector<std::vector<std::size_t>> per_type_edges(kEdgeTypeCount);
    for (std::size_t e = 0; e < tpl.edges.size(); ++e)
        per_type_edges[static_cast<std::size_t>(tpl.edges[e].type)].push_back(e);
    for (std::size_t ti = 0; ti < kEdgeTypeCount; ++ti) {
        const auto& edges = per_type_edges[static_cast<std::size_t>(kAllEdgeTypes[ti])];
        std::vector<std::size_t> rows, src;
        for (std::size_t b = 0; b < batch; ++b)
            for (auto e : edges) {
                rows.push_back(b * tpl.edge_count() + e);
                src.push_back(node_row(tpl, batch, b, tpl.edges[e].src));
                const std::size_t d = node_row(tpl, batch, b, tpl.edges[e].dst);
                dst.push_back(d);
                indegree[d] += 1.0;
            }
        EdgeGroup g;
        g.count = rows.size();
        g.rows = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
        g.src = std::make_shared<const std::vector<std::size_t>>(std::move(src));
        l.groups.push_back(std::move(g));
    }
    std::vector<double> w(dst.size());
    for (std::size_t i = 0; i < dst.size(); ++i) w[i] = 1.0 / indegree[dst[i]];
    l.dst = std::make_shared<const std::vector<std::size_t>>(std::move(dst));
    l.dst_weight = std::make_shared<const std::vector<double>>(std::move(w));
    for (std::size_t g = 0; g < tpl.generator_node.size(); ++g) {
        std::vector<std::size_t> rows(batch);
        for (std::size_t b = 0; b < batch; ++b) rows[b] = b * tpl.gen_count() + tpl.generator_node[g];
        l.head_rows.push_back(std::make_shared<const std::vector<std::size_t>>(std::move(rows)));
    }
    return l;
}

GraphBatch stack_graphs(const std::vector<const HeteroGraph*>& graphs)
{
    if (graphs.empty()) throw ShapeError("stack_graphs: empty batch");
    const HeteroGraph& f = *graphs.front();
    const auto n = static_cast<Eigen::Index>(graphs.size());
    GraphBatch b;
    b.gen_x.resize(n * f.gen_x.rows(), f.gen_x.cols());
    b.other_x.resize(n * f.other_x.rows(), f.other_x.cols());
    b.edge_x.resize(n * f.edge_x.rows(), f.edge_x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const HeteroGraph& g = *graphs[static_cast<std::size_t>(i)];
        if (!g.normalized) throw std::invalid_argument("stack_graphs: graph is not normalized");
        if (g.gen_x.rows() != f.gen_x.rows() || g.other_x.rows() != f.other_x.rows() || g.edge_x.rows() != f.edge_x.rows())
            throw ShapeError("stack_graphs: graphs of different topology");
        b.gen_x.middleRows(i * g.gen_x.rows(), g.gen_x.rows()) = g.gen_x;
        b.other_x.middleRows(i * g.other_x.rows(), g.other_x.rows()) = g.other_x;
        b.edge_x.middleRows(i * g.edge_x.rows(), g.edge_x.rows()) = g.edge_x;
    }
    return b;
}

SurrogateForward surrogate_forward(SurrogateModel& model, Tape& t, const GraphBatch& batch, const BatchLayout& layout,
                                   bool with_heads)
{
    ParameterSet& ps = model.params;
    const GraphTemplate& tpl = model.tpl;
    const auto n_gen = static_cast<Eigen::Index>(layout.batch * tpl.gen_count());
    const auto n_other = static_cast<Eigen::Index>(layout.batch * tpl.other_count());
    if (batch.gen_x.rows() != n_gen || batch.other_x.rows() != n_other ||
        batch.edge_x.rows() != static_cast<Eigen::Index>(layout.batch * tpl.edge_count()))
        throw ShapeError("surrogate_forward: batch does not match its layout");

    Var hg = transform(t, ps, "gen", t.constant(batch.gen_x));
    Var ho = transform(t, ps, "other", t.constant(batch.other_x));
    std::vector<Var> edge_emb(kEdgeTypeCount);
    for (std::size_t ti = 0; ti < kEdgeTypeCount; ++ti) {
        const auto& g = layout.groups[ti];
        if (g.count == 0) continue;
        Matrix x(static_cast<Eigen::Index>(g.count), batch.edge_x.cols());
        for (std::size_t i = 0; i < g.count; ++i)
            x.row(static_cast<Eigen::Index>(i)) = batch.edge_x.row(static_cast<Eigen::Index>((*g.rows)[i]));
        edge_emb[ti] = transform(t, ps, edge_type_name(kAllEdgeTypes[ti]), t.constant(std::move(x)));
    }

    for (std::size_t k = 0; k < model.config.rounds; ++k) {
        const std::string r = "round" + std::to_string(k) + "/";
        const Var h = ag::concat_rows({hg, ho});
        std::vector<Var> messages;
        for (std::size_t ti = 0; ti < kEdgeTypeCount; ++ti) {
            const auto& g = layout.groups[ti];
            if (g.count == 0) continue;
            const Var in = ag::concat_cols({ag::gather_rows(h, g.src), edge_emb[ti]});
            messages.push_back(ag::relu(dense(t, ps, r + "message/" + edge_type_name(kAllEdgeTypes[ti]) + "/", in)));
        }
        const Var agg = ag::scatter_rows(ag::concat_rows(messages), layout.dst, layout.dst_weight, n_gen + n_other);
        const Var hg_next = ag::relu(dense(t, ps, r + "update/gen/", ag::concat_cols({hg, ag::slice_rows(agg, 0, n_gen)})));
        const Var ho_next =
            ag::relu(dense(t, ps, r + "update/other/", ag::concat_cols({ho, ag::slice_rows(agg, n_gen, n_other)})));
        hg = hg_next;
        ho = ho_next;
    }

    SurrogateForward out;
    out.gen_nodes = hg;
    out.other_nodes = ho;
    out.state = ag::concat_cols({ag::segment_mean(hg, static_cast<Eigen::Index>(tpl.gen_count())),
                                 ag::segment_mean(ho, static_cast<Eigen::Index>(tpl.other_count()))});
    if (!with_heads) return out;
    std::vector<Var> heads;
    for (std::size_t g = 0; g < model.generators; ++g) {
        const std::string p = "head" + std::to_string(g) + "/";
        Var x = ag::concat_cols({out.state, ag::gather_rows(hg, layout.head_rows[g])});
        x = ag::relu(dense(t, ps, p, x, "1"));
        x = ag::relu(dense(t, ps, p, x, "2"));
        heads.push_back(ag::clamp(dense(t, ps, p, x, "3"), -model.config.output_clamp, model.config.output_clamp));
    }
    out.curves = ag::concat_cols(heads);
    return out;
}

namespace {

template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename M>
void ensure(M& m, Eigen::Index rows, Eigen::Index cols)
{
    if (m.rows() < rows || m.cols() != cols) m.resize(std::max(rows, m.rows()), cols);
}

/// relu(m + b) in place over rows [r0, r0 + rows) and columns [c0, c0 + b.cols()).
template <typename T>
void bias_relu(ColMat<T>& m, Eigen::Index r0, Eigen::Index rows, const RowMat<T>& b, Eigen::Index c0 = 0)
{
    for (Eigen::Index c = 0; c < b.cols(); ++c) {
        T* p = m.col(c0 + c).data() + r0;
        const T bc = b(0, c);
        for (Eigen::Index r = 0; r < rows; ++r) p[r] = std::max(p[r] + bc, T(0));
    }
}

template <typename T>
void bias_relu(RowMat<T>& m, Eigen::Index rows, const RowMat<T>& b)
{
    const Eigen::Index cols = m.cols();
    const T* bp = b.data();
    T* p = m.data();
    for (Eigen::Index r = 0; r < rows; ++r, p += cols)
        for (Eigen::Index c = 0; c < cols; ++c) p[c] = std::max(p[c] + bp[c], T(0));
}

/// First `cols` columns: dst row i = src row index[i].
template <typename T>
void gather(const ColMat<T>& src, const std::size_t* index, Eigen::Index rows, Eigen::Index cols, ColMat<T>& dst)
{
    for (Eigen::Index c = 0; c < cols; ++c) {
        const T* s = src.col(c).data();
        T* d = dst.col(c).data();
        for (Eigen::Index i = 0; i < rows; ++i) d[i] = s[index[i]];
    }
}

}  // namespace

struct SurrogateInference::Engine {
    virtual ~Engine() = default;
    virtual void run(const std::vector<const HeteroGraph*>& graphs, Matrix* curves, Matrix* state, Matrix* gen) = 0;
    virtual void run_curves(const std::vector<const HeteroGraph*>& graphs, std::vector<AngleCurveSet>& out,
                            double dt_out, Matrix* state) = 0;
};

namespace {

template <typename T>
class ScalarEngine final : public SurrogateInference::Engine {
public:
    ScalarEngine(const SurrogateModel& model, std::size_t chunk, std::size_t embed_chunk)
        : model_(model), chunk_(chunk), embed_chunk_(embed_chunk)
    {
        for (std::size_t i = 0; i < model.params.size(); ++i)
            w_.emplace(model.params[i].name, model.params[i].value.template cast<T>());
        const auto e = static_cast<Eigen::Index>(model.config.embed);
        const auto h1 = static_cast<Eigen::Index>(model.config.head_hidden1);
        head_state_w_.resize(2 * e, h1 * static_cast<Eigen::Index>(model.generators));
        for (std::size_t g = 0; g < model.generators; ++g)
            head_state_w_.middleCols(static_cast<Eigen::Index>(g) * h1, h1) = W(head(g) + "w1").topRows(2 * e);
    }

    void run(const std::vector<const HeteroGraph*>& graphs, Matrix* curves, Matrix* state, Matrix* gen) override
    {
        const auto n = static_cast<Eigen::Index>(graphs.size());
        const auto pts = static_cast<Eigen::Index>(model_.points);
        if (curves) curves->resize(n, static_cast<Eigen::Index>(model_.generators) * pts);
        if (state) state->resize(n, static_cast<Eigen::Index>(model_.state_width()));
        if (gen)
            gen->resize(n * static_cast<Eigen::Index>(model_.tpl.gen_count()), static_cast<Eigen::Index>(model_.config.embed));
        auto sink = [&](Eigen::Index row, std::size_t g, const T* o) {
            double* d = curves->row(row).data() + static_cast<Eigen::Index>(g) * pts;
            for (Eigen::Index q = 0; q < pts; ++q) d[q] = static_cast<double>(o[q]);
        };
        for (std::size_t start = 0; start < graphs.size(); start += chunk_) {
            const std::size_t k = embed(graphs, start, gen);
            if (state)
                state->middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(k)) =
                    state_.topRows(static_cast<Eigen::Index>(k)).template cast<double>();
            if (curves) heads(k, start, sink);
        }
    }

    void run_curves(const std::vector<const HeteroGraph*>& graphs, std::vector<AngleCurveSet>& out, double dt_out,
                    Matrix* state) override
    {
        if (state) state->resize(static_cast<Eigen::Index>(graphs.size()), static_cast<Eigen::Index>(model_.state_width()));
        out.clear();
        out.reserve(graphs.size());
        for (std::size_t i = 0; i < graphs.size(); ++i) {
            out.emplace_back(model_.generators, model_.points, AngleCurveSet::Origin::Predicted).dt_out = dt_out;
        }
        const auto pts = static_cast<Eigen::Index>(model_.points);
        ensure(mag_, 1, pts);
        // Inverse transform sign(y) exp(|y|) on the clamped head outputs.
        auto sink = [&](Eigen::Index row, std::size_t g, const T* o) {
            const Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>> y(o, pts);
            mag_.row(0) = y.abs().exp().matrix();
            double* d = out[static_cast<std::size_t>(row)].angles.data() + static_cast<Eigen::Index>(g) * pts;
            const T* m = mag_.data();
            for (Eigen::Index q = 0; q < pts; ++q) d[q] = static_cast<double>(o[q] >= T(0) ? m[q] : -m[q]);
        };
        for (std::size_t start = 0; start < graphs.size(); start += chunk_) {
            const std::size_t k = embed(graphs, start, nullptr);
            if (state)
                state->middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(k)) =
                    state_.topRows(static_cast<Eigen::Index>(k)).template cast<double>();
            heads(k, start, sink);
        }
    }

private:
    static std::string head(std::size_t g) { return "head" + std::to_string(g) + "/"; }
    const RowMat<T>& W(const std::string& name) const { return w_.at(name); }

    const BatchLayout& layout(std::size_t n)
    {
        auto it = layouts_.find(n);
        if (it == layouts_.end()) it = layouts_.emplace(n, BatchLayout::make(model_.tpl, n)).first;
        return it->second;
    }

    /// Embeds the head chunk starting at `start`; returns its size.
    std::size_t embed(const std::vector<const HeteroGraph*>& graphs, std::size_t start, Matrix* gen)
    {
        const std::size_t k = std::min(chunk_, graphs.size() - start);
        for (std::size_t sub = 0; sub < k; sub += embed_chunk_)
            embed_chunk(graphs.data() + start + sub, std::min(embed_chunk_, k - sub), sub, gen, start + sub);
        return k;
    }

    void embed_chunk(const HeteroGraph* const* graphs, std::size_t n, std::size_t at, Matrix* gen, std::size_t row0)
    {
        const GraphTemplate& tpl = model_.tpl;
        const BatchLayout& l = layout(n);
        const auto e = static_cast<Eigen::Index>(model_.config.embed);
        const auto gpg = static_cast<Eigen::Index>(tpl.gen_count());
        const auto opg = static_cast<Eigen::Index>(tpl.other_count());
        const auto epg = static_cast<Eigen::Index>(tpl.edge_count());
        const auto nn = static_cast<Eigen::Index>(n);
        const auto n_gen = nn * gpg;
        const auto n_other = nn * opg;
        const auto n_nodes = n_gen + n_other;

        ensure(xg_, n_gen, kGenFeatures);
        ensure(xo_, n_other, kOtherFeatures);
        for (Eigen::Index i = 0; i < nn; ++i) {
            const HeteroGraph& g = *graphs[i];
            if (!g.normalized) throw std::invalid_argument("surrogate inference: graph is not normalized");
            if (g.gen_x.rows() != gpg || g.other_x.rows() != opg || g.edge_x.rows() != epg)
                throw ShapeError("surrogate inference: graph does not match the model topology");
            xg_.middleRows(i * gpg, gpg) = g.gen_x.template cast<T>();
            xo_.middleRows(i * opg, opg) = g.other_x.template cast<T>();
        }

        // Feature transforms into the left half of ha.
        ensure(ha_, n_nodes, 2 * e);
        ensure(ha_next_, n_nodes, 2 * e);
        auto node_transform = [&](const std::string& type, const ColMat<T>& x, Eigen::Index r0, Eigen::Index rows) {
            const std::string p = transform_name(type);
            ensure(tmp_, rows, e);
            tmp_.topRows(rows).noalias() = x.topRows(rows) * W(p + "w1");
            bias_relu<T>(tmp_, 0, rows, W(p + "b1"));
            ha_.block(r0, 0, rows, e).noalias() = tmp_.topRows(rows) * W(p + "w2");
            bias_relu<T>(ha_, r0, rows, W(p + "b2"));
        };
        node_transform("gen", xg_, 0, n_gen);
        node_transform("other", xo_, n_gen, n_other);

        // Edge embeddings are static: they go once into the right half of cat.
        cat_.resize(kEdgeTypeCount);
        for (std::size_t ti = 0; ti < kEdgeTypeCount; ++ti) {
            const auto& grp = l.groups[ti];
            if (grp.count == 0) continue;
            const auto rows = static_cast<Eigen::Index>(grp.count);
            ensure(xe_, rows, kEdgeFeatures);
            for (Eigen::Index i = 0; i < rows; ++i) {
                const std::size_t r = (*grp.rows)[static_cast<std::size_t>(i)];
                const double* f =
                    graphs[r / tpl.edge_count()]->edge_x.row(static_cast<Eigen::Index>(r % tpl.edge_count())).data();
                for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(kEdgeFeatures); ++c) xe_(i, c) = static_cast<T>(f[c]);
            }
            const std::string p = transform_name(edge_type_name(kAllEdgeTypes[ti]));
            ensure(tmp_, rows, e);
            tmp_.topRows(rows).noalias() = xe_.topRows(rows) * W(p + "w1");
            bias_relu<T>(tmp_, 0, rows, W(p + "b1"));
            ensure(cat_[ti], rows, 2 * e);
            cat_[ti].block(0, e, rows, e).noalias() = tmp_.topRows(rows) * W(p + "w2");
            bias_relu<T>(cat_[ti], 0, rows, W(p + "b2"), e);
        }

        // Message rounds; aggregates accumulate in the right half of ha.
        for (std::size_t k = 0; k < model_.config.rounds; ++k) {
            const std::string r = "round" + std::to_string(k) + "/";
            ha_.block(0, e, n_nodes, e).setZero();
            std::size_t msg_at = 0;
            for (std::size_t ti = 0; ti < kEdgeTypeCount; ++ti) {
                const auto& grp = l.groups[ti];
                if (grp.count == 0) continue;
                const auto rows = static_cast<Eigen::Index>(grp.count);
                const std::string p = r + "message/" + edge_type_name(kAllEdgeTypes[ti]) + "/";
                gather<T>(ha_, grp.src->data(), rows, e, cat_[ti]);
                ensure(msg_, rows, e);
                msg_.topRows(rows).noalias() = cat_[ti].topRows(rows) * W(p + "w");
                bias_relu<T>(msg_, 0, rows, W(p + "b"));
                const std::size_t* dst = l.dst->data() + msg_at;
                const double* wt = l.dst_weight->data() + msg_at;
                for (Eigen::Index c = 0; c < e; ++c) {
                    T* a = ha_.col(e + c).data();
                    const T* v = msg_.col(c).data();
                    for (Eigen::Index i = 0; i < rows; ++i) a[dst[i]] += static_cast<T>(wt[i]) * v[i];
                }
                msg_at += grp.count;
            }
            auto update = [&](const std::string& type, Eigen::Index r0, Eigen::Index rows) {
                const std::string p = r + "update/" + type + "/";
                ha_next_.block(r0, 0, rows, e).noalias() = ha_.middleRows(r0, rows) * W(p + "w");
                bias_relu<T>(ha_next_, r0, rows, W(p + "b"));
            };
            update("gen", 0, n_gen);
            update("other", n_gen, n_other);
            std::swap(ha_, ha_next_);
        }

        // Mean pooling into rows [at, at + n) of the head chunk, and the gen-node
        // rows each curve head reads.
        const auto a = static_cast<Eigen::Index>(at);
        ensure(state_, static_cast<Eigen::Index>(chunk_), 2 * e);
        for (Eigen::Index i = 0; i < nn; ++i) {
            state_.row(a + i).head(e) = ha_.block(i * gpg, 0, gpg, e).colwise().sum() / static_cast<T>(gpg);
            state_.row(a + i).tail(e) = ha_.block(n_gen + i * opg, 0, opg, e).colwise().sum() / static_cast<T>(opg);
        }
        if (gen) gen->middleRows(static_cast<Eigen::Index>(row0) * gpg, n_gen) = ha_.block(0, 0, n_gen, e).template cast<double>();
        head_x_.resize(model_.generators);
        for (std::size_t g = 0; g < model_.generators; ++g) {
            ensure(head_x_[g], static_cast<Eigen::Index>(chunk_), e);
            const std::size_t* rows = l.head_rows[g]->data();
            for (Eigen::Index c = 0; c < e; ++c) {
                const T* src = ha_.col(c).data();
                for (Eigen::Index i = 0; i < nn; ++i) head_x_[g](a + i, c) = src[rows[i]];
            }
        }
    }

    /// Clamped head outputs go to sink(row, generator, points values).
    template <typename Sink>
    void heads(std::size_t n, std::size_t row0, Sink&& sink)
    {
        const auto e = static_cast<Eigen::Index>(model_.config.embed);
        const auto nn = static_cast<Eigen::Index>(n);
        const auto r0 = static_cast<Eigen::Index>(row0);
        const auto h1 = static_cast<Eigen::Index>(model_.config.head_hidden1);
        const auto h2 = static_cast<Eigen::Index>(model_.config.head_hidden2);
        const auto pts = static_cast<Eigen::Index>(model_.points);
        // The state part of every head's first layer in one product.
        ensure(head_s_, nn, head_state_w_.cols());
        head_s_.topRows(nn).noalias() = state_.topRows(nn) * head_state_w_;
        ensure(z1_, nn, h1);
        ensure(z2_, nn, h2);
        ensure(out_, nn, pts);
        const T c = static_cast<T>(model_.config.output_clamp);
        for (std::size_t g = 0; g < model_.generators; ++g) {
            const std::string p = head(g);
            z1_.topRows(nn) = head_s_.block(0, static_cast<Eigen::Index>(g) * h1, nn, h1);
            z1_.topRows(nn).noalias() += head_x_[g].topRows(nn) * W(p + "w1").bottomRows(e);
            bias_relu<T>(z1_, nn, W(p + "b1"));
            z2_.topRows(nn).noalias() = z1_.topRows(nn) * W(p + "w2");
            bias_relu<T>(z2_, nn, W(p + "b2"));
            out_.topRows(nn).noalias() = z2_.topRows(nn) * W(p + "w3");
            const T* b3 = W(p + "b3").data();
            for (Eigen::Index i = 0; i < nn; ++i) {
                T* o = out_.row(i).data();
                for (Eigen::Index q = 0; q < pts; ++q) o[q] = std::clamp(o[q] + b3[q], -c, c);
                sink(r0 + i, g, static_cast<const T*>(o));
            }
        }
    }

    const SurrogateModel& model_;
    std::size_t chunk_;
    std::size_t embed_chunk_;
    std::map<std::string, RowMat<T>> w_;
    std::map<std::size_t, BatchLayout> layouts_;
    RowMat<T> head_state_w_;  // 2 embed x (generators * head_hidden1)

    ColMat<T> xg_, xo_, xe_, tmp_;   // features and first-layer activations
    ColMat<T> ha_, ha_next_;         // [node embedding | aggregate], gen rows then other rows
    std::vector<ColMat<T>> cat_;     // per edge type [source embedding | edge embedding]
    ColMat<T> msg_;
    RowMat<T> state_;                // head chunk x 2 embed
    std::vector<RowMat<T>> head_x_;  // per generator: head chunk x embed
    RowMat<T> head_s_, z1_, z2_, out_, mag_;
};

}  // namespace

SurrogateInference::SurrogateInference(const SurrogateModel& model, Precision precision, std::size_t chunk,
                                       std::size_t embed_chunk)
{
    chunk = std::max<std::size_t>(chunk, 1);
    embed_chunk = std::max<std::size_t>(embed_chunk, 1);
    if (precision == Precision::Single)
        engine_ = std::make_unique<ScalarEngine<float>>(model, chunk, embed_chunk);
    else
        engine_ = std::make_unique<ScalarEngine<double>>(model, chunk, embed_chunk);
}

SurrogateInference::~SurrogateInference() = default;
SurrogateInference::SurrogateInference(SurrogateInference&&) noexcept = default;
SurrogateInference& SurrogateInference::operator=(SurrogateInference&&) noexcept = default;

void SurrogateInference::run(const std::vector<const HeteroGraph*>& graphs, Matrix* curves, Matrix* state, Matrix* gen)
{
    engine_->run(graphs, curves, state, gen);
}

std::vector<AngleCurveSet> SurrogateInference::curves(const std::vector<const HeteroGraph*>& graphs, double dt_out,
                                                      Matrix* state)
{
    std::vector<AngleCurveSet> out;
    engine_->run_curves(graphs, out, dt_out, state);
    return out;
}

HeteroGraph prepare_graph(const SurrogateModel& model, const HeteroGraph& graph)
{
    if (graph.normalized) return graph;
    if (model.stats.empty()) throw std::invalid_argument("surrogate model has no normalization statistics");
    HeteroGraph g = graph;
    normalize(g, model.stats);
    return g;
}

Embedding embed(SurrogateModel& model, const std::vector<HeteroGraph>& graphs)
{
    std::vector<HeteroGraph> prepared;
    prepared.reserve(graphs.size());
    for (const auto& g : graphs) prepared.push_back(prepare_graph(model, g));
    Embedding e;
    Matrix gen;
    SurrogateInference(model, Precision::Double, kInferenceChunk).run(pointers(prepared), nullptr, &e.state, &gen);
    const auto n = static_cast<Eigen::Index>(model.tpl.gen_count());
    for (std::size_t i = 0; i < graphs.size(); ++i) e.gen.push_back(gen.middleRows(static_cast<Eigen::Index>(i) * n, n));
    return e;
}

/// Pointers to the graphs if all are normalized, else to normalized copies in `storage`.
std::vector<const HeteroGraph*> normalized_view(const SurrogateModel& model, const std::vector<HeteroGraph>& graphs,
                                                std::vector<HeteroGraph>& storage)
{
    if (std::all_of(graphs.begin(), graphs.end(), [](const HeteroGraph& g) { return g.normalized; })) return pointers(graphs);
    storage.reserve(graphs.size());
    for (const auto& g : graphs) storage.push_back(prepare_graph(model, g));
    return pointers(storage);
}

Matrix predict_transformed(SurrogateModel& model, const std::vector<HeteroGraph>& graphs, std::size_t chunk,
                           Precision precision)
{
    std::vector<HeteroGraph> prepared;
    const std::vector<const HeteroGraph*> ptrs = normalized_view(model, graphs, prepared);
    return predict_rows(model, ptrs, std::max<std::size_t>(chunk, 1), precision);
}

AngleCurveSet curves_from_transformed(const double* row, std::size_t generators, std::size_t points, double dt_out)
{
    AngleCurveSet c(generators, points, AngleCurveSet::Origin::Predicted);
    c.dt_out = dt_out;
    for (std::size_t k = 0; k < generators * points; ++k) c.angles[k] = inverse_transform(row[k]);
    return c;
}

std::vector<AngleCurveSet> predict_curves(SurrogateModel& model, const std::vector<HeteroGraph>& graphs,
                                          Precision precision)
{
    std::vector<HeteroGraph> prepared;
    const std::vector<const HeteroGraph*> ptrs = normalized_view(model, graphs, prepared);
    return SurrogateInference(model, precision, kInferenceChunk).curves(ptrs, SimConfig{}.dt_out);
}

SurrogateMetrics SurrogateMetrics::from_confusion(std::size_t tp, std::size_t tn, std::size_t fp, std::size_t fn)
{
    auto pct = [](std::size_t num, std::size_t den) {
        return den == 0 ? 100.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
    };
    SurrogateMetrics m;
    m.tp = tp;
    m.tn = tn;
    m.fp = fp;
    m.fn = fn;
    m.count = tp + tn + fp + fn;
    m.tnr = pct(tn, tn + fp);
    m.tpr = pct(tp, tp + fn);
    m.acc = pct(tp + tn, m.count);
    m.f1 = pct(2 * tp, 2 * tp + fp + fn);
    return m;
}

double mpec(const std::vector<double>& truth, const std::vector<double>& pred, double floor_deg)
{
    if (truth.size() != pred.size() || truth.empty()) throw ShapeError("mpec: length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const double y = inverse_transform(truth[k]);
        const double yh = inverse_transform(pred[k]);
        s += std::abs(y - yh) / std::max(std::abs(y), floor_deg);
    }
    return 100.0 * s / static_cast<double>(truth.size());
}

SurrogateMetrics surrogate_metrics(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records)
{
    if (records.empty()) throw std::invalid_argument("surrogate_metrics: no records");
    const auto graphs = prepared_graphs(model, data, records);
    const Matrix pred = predict_rows(model, pointers(graphs), kInferenceChunk);
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    double err = 0.0;
    const double dt = SimConfig{}.dt_out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const DatasetRecord& r = data.records[records[i]];
        const double* row = pred.row(static_cast<Eigen::Index>(i)).data();
        err += mpec(r.labels, std::vector<double>(row, row + pred.cols()));
        const bool pred_unstable = tsi(curves_from_transformed(row, model.generators, model.points, dt)) <= 0.0;
        const bool unstable = !r.stable;
        if (unstable && pred_unstable) ++tp;
        if (!unstable && !pred_unstable) ++tn;
        if (!unstable && pred_unstable) ++fp;
        if (unstable && !pred_unstable) ++fn;
    }
    SurrogateMetrics m = SurrogateMetrics::from_confusion(tp, tn, fp, fn);
    m.mpec = err / static_cast<double>(records.size());
    return m;
}

std::string format_metrics(const SurrogateMetrics& m)
{
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "records = %zu\nMPEC = %.4f %%\nF1 = %.4f %%\nAcc = %.4f %%\nTNR = %.4f %%\nTPR = %.4f %%\n"
                  "TP = %zu\nTN = %zu\nFP = %zu\nFN = %zu\n",
                  m.count, m.mpec, m.f1, m.acc, m.tnr, m.tpr, m.tp, m.tn, m.fp, m.fn);
    return buf;
}

double surrogate_mse(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records)
{
    const auto graphs = prepared_graphs(model, data, records);
    return mse_of(predict_rows(model, pointers(graphs), kInferenceChunk), labels_matrix(data, records));
}

namespace {

/// One Adam step on the listed records of a prepared graph cache.
double train_step(SurrogateModel& model, const std::vector<HeteroGraph>& cache, const Dataset& data,
                  const std::vector<std::size_t>& cache_rows, const std::vector<std::size_t>& records,
                  std::map<std::size_t, BatchLayout>& layouts, double lr)
{
    const std::size_t n = records.size();
    auto it = layouts.find(n);
    if (it == layouts.end()) it = layouts.emplace(n, BatchLayout::make(model.tpl, n)).first;
    std::vector<const HeteroGraph*> part;
    part.reserve(n);
    for (auto r : cache_rows) part.push_back(&cache[r]);
    model.params.zero_grad();
    Tape tape;
    const SurrogateForward f = surrogate_forward(model, tape, stack_graphs(part), it->second);
    const Var loss = ag::mean(ag::square(ag::sub(f.curves, tape.constant(labels_matrix(data, records)))));
    tape.backward(loss);
    adam_step(model.params, AdamConfig{lr});
    return loss.scalar();
}

std::vector<HeteroGraph> raw_graphs(const GraphTemplate& tpl, const Dataset& data, const std::vector<std::size_t>& records)
{
    std::vector<HeteroGraph> gs;
    gs.reserve(records.size());
    for (auto i : records) gs.push_back(data.graph(tpl, i));
    return gs;
}

}  // namespace

void fit_steps(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records, std::size_t steps,
               double lr, std::size_t batch, Rng& rng)
{
    if (records.empty()) throw std::invalid_argument("fit_steps: no records");
    if (model.stats.empty()) model.stats = fit_norm_stats(raw_graphs(model.tpl, data, records));
    const auto cache = prepared_graphs(model, data, records);
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::map<std::size_t, BatchLayout> layouts;
    const std::size_t b = std::min(std::max<std::size_t>(batch, 1), records.size());
    std::size_t pos = order.size();
    for (std::size_t s = 0; s < steps; ++s) {
        if (pos + b > order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            pos = 0;
        }
        std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                      order.begin() + static_cast<std::ptrdiff_t>(pos + b));
        std::vector<std::size_t> recs;
        for (auto r : rows) recs.push_back(records[r]);
        train_step(model, cache, data, rows, recs, layouts, lr);
        pos += b;
    }
}

SurrogateTrainResult train_surrogate(const NetworkCase& net, const Dataset& data, const SurrogateTrainConfig& config,
                                     const ProgressFn& log)
{
    if (data.records.empty()) throw std::invalid_argument("train_surrogate: empty dataset");
    if (config.batch == 0 || config.decay_every == 0) throw ValidationError("batch and decay_every must be positive");
    Rng rng(config.seed);
    SurrogateTrainResult res{SurrogateModel::create(net, data.points, config.model, rng), {}, 0, {}, {}, {}};
    SurrogateModel& model = res.model;
    if (model.generators * model.points != data.label_length() || model.tpl.feature_length() != data.feature_length())
        throw ShapeError("train_surrogate: dataset does not match the case");
    res.split = split_dataset(data, config.seed);
    const auto& train = res.split.train;
    const auto& val = res.split.validation;
    if (train.empty() || val.empty()) throw std::invalid_argument("train_surrogate: split has an empty part");
    model.stats = fit_norm_stats(raw_graphs(model.tpl, data, train));

    const auto train_cache = prepared_graphs(model, data, train);
    const auto val_cache = prepared_graphs(model, data, val);
    const Matrix train_labels = labels_matrix(data, train);
    const Matrix val_labels = labels_matrix(data, val);
    auto evaluate = [&](std::size_t epoch, double lr) {
        EpochLog e{epoch, lr, mse_of(predict_rows(model, pointers(train_cache), kInferenceChunk), train_labels),
                   mse_of(predict_rows(model, pointers(val_cache), kInferenceChunk), val_labels)};
        res.history.push_back(e);
        if (log) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "epoch %zu lr %.3g train_mse %.6f validation_mse %.6f", e.epoch, e.lr,
                          e.train_mse, e.validation_mse);
            log(buf);
        }
        return e.validation_mse;
    };

    double best = evaluate(0, config.lr);
    ParameterSet best_params = model.params;
    std::size_t since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::map<std::size_t, BatchLayout> layouts;
    const std::size_t b = std::min(config.batch, train.size());
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const double lr = config.lr * std::pow(config.lr_decay, static_cast<double>((epoch - 1) / config.decay_every));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t pos = 0; pos < order.size(); pos += b) {
            const std::size_t n = std::min(b, order.size() - pos);
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                          order.begin() + static_cast<std::ptrdiff_t>(pos + n));
            std::vector<std::size_t> recs;
            for (auto r : rows) recs.push_back(train[r]);
            train_step(model, train_cache, data, rows, recs, layouts, lr);
        }
        const double v = evaluate(epoch, lr);
        if (v < best) {
            best = v;
            best_params = model.params;
            res.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    model.params = best_params;
    res.validation = surrogate_metrics(model, data, val);
    if (!res.split.test.empty()) res.test = surrogate_metrics(model, data, res.split.test);
    return res;
}

void save_surrogate(const SurrogateModel& model, const std::string& path)
{
    NamedArrays arrays;
    const SurrogateConfig& c = model.config;
    Matrix meta(1, 7);
    meta << static_cast<double>(c.embed), static_cast<double>(c.rounds), static_cast<double>(c.head_hidden1),
        static_cast<double>(c.head_hidden2), c.output_clamp, static_cast<double>(model.generators),
        static_cast<double>(model.points);
    arrays.emplace_back("meta/surrogate", meta);
    auto put_stats = [&](const std::string& name, const ZScore& z) {
        arrays.emplace_back("stats/" + name + "/mean", Eigen::Map<const Matrix>(z.mean.data(), 1, static_cast<Eigen::Index>(z.mean.size())));
        arrays.emplace_back("stats/" + name + "/std", Eigen::Map<const Matrix>(z.std.data(), 1, static_cast<Eigen::Index>(z.std.size())));
    };
    if (model.stats.empty()) throw std::invalid_argument("save_surrogate: model has no normalization statistics");
    put_stats("gen", model.stats.gen);
    put_stats("other", model.stats.other);
    put_stats("edge", model.stats.edge);
    export_parameters(model.params, "surrogate/", arrays);
    save_arrays(path, arrays);
}

SurrogateModel load_surrogate(const NetworkCase& net, const std::string& path)
{
    const NamedArrays arrays = load_arrays(path);
    const Matrix& meta = find_array(arrays, "meta/surrogate");
    if (meta.size() != 7) throw ParseError(path + ": malformed surrogate metadata");
    SurrogateConfig c;
    c.embed = static_cast<std::size_t>(meta(0, 0));
    c.rounds = static_cast<std::size_t>(meta(0, 1));
    c.head_hidden1 = static_cast<std::size_t>(meta(0, 2));
    c.head_hidden2 = static_cast<std::size_t>(meta(0, 3));
    c.output_clamp = meta(0, 4);
    if (static_cast<std::size_t>(meta(0, 5)) != net.generators.size())
        throw ParseError(path + ": surrogate was trained for " + std::to_string(static_cast<std::size_t>(meta(0, 5))) +
                         " generators, case has " + std::to_string(net.generators.size()));
    Rng rng(0);
    SurrogateModel m = SurrogateModel::create(net, static_cast<std::size_t>(meta(0, 6)), c, rng);
    auto get_stats = [&](const std::string& name, ZScore& z) {
        const Matrix& mean = find_array(arrays, "stats/" + name + "/mean");
        const Matrix& sd = find_array(arrays, "stats/" + name + "/std");
        z.mean.assign(mean.data(), mean.data() + mean.size());
        z.std.assign(sd.data(), sd.data() + sd.size());
    };
    get_stats("gen", m.stats.gen);
    get_stats("other", m.stats.other);
    get_stats("edge", m.stats.edge);
    import_parameters(m.params, "surrogate/", arrays);
    return m;
}

}  // namespace gd2rl
