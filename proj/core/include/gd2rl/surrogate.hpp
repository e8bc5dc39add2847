#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gd2rl/autograd.hpp"
#include "gd2rl/dataset.hpp"
#include "gd2rl/graph.hpp"
#include "gd2rl/transient.hpp"

namespace gd2rl {

struct SurrogateConfig {
    std::size_t embed = 30;   // node and edge embedding width
    std::size_t rounds = 2;   // message-passing rounds
    std::size_t head_hidden1 = 200;
    std::size_t head_hidden2 = 150;
    double output_clamp = 12.0;  // |head output| bound before the inverse transform

    void validate() const;
};

/// Heterogeneous message-passing network over one case's graph template.
/// Parameter names:
///   transform/{gen,other,<edge type>}/{w1,b1,w2,b2}
///   round{k}/message/<edge type>/{w,b}, round{k}/update/{gen,other}/{w,b}
///   head{g}/{w1,b1,w2,b2,w3,b3}
struct SurrogateModel {
    SurrogateConfig config;
    GraphTemplate tpl;
    std::size_t generators = 0;
    std::size_t points = 0;
    NormStats stats;
    ParameterSet params;

    static SurrogateModel create(const NetworkCase& net, std::size_t points, const SurrogateConfig& config, Rng& rng);

    std::size_t state_width() const { return 2 * config.embed; }
};

/// Index arrays of a stacked batch of `batch` graphs. Node rows are all
/// gen-nodes (graph-major) followed by all other-nodes (graph-major).
struct BatchLayout {
    std::size_t batch = 0;
    struct EdgeGroup {
        std::shared_ptr<const std::vector<std::size_t>> rows;  // rows of the stacked edge features
        std::shared_ptr<const std::vector<std::size_t>> src;   // node rows
        std::size_t count = 0;
    };
    std::vector<EdgeGroup> groups;  // one per edge type
    std::shared_ptr<const std::vector<std::size_t>> dst;     // message order = groups concatenated
    std::shared_ptr<const std::vector<double>> dst_weight;   // 1 / in-degree
    std::vector<std::shared_ptr<const std::vector<std::size_t>>> head_rows;  // per generator, gen-node rows

    static BatchLayout make(const GraphTemplate& tpl, std::size_t batch);
};

/// Tape outputs of one forward pass.
struct SurrogateForward {
    Var gen_nodes;    // (batch * gen) x embed
    Var other_nodes;  // (batch * other) x embed
    Var state;        // batch x 2 embed
    Var curves;       // batch x (generators * points), transformed, generator-major
};

/// Stacks normalized graphs into (gen, other, edge) feature matrices.
struct GraphBatch {
    Matrix gen_x, other_x, edge_x;
};
GraphBatch stack_graphs(const std::vector<const HeteroGraph*>& graphs);

/// Embedding only (`with_heads` false) or embedding plus curve heads.
SurrogateForward surrogate_forward(SurrogateModel& model, Tape& tape, const GraphBatch& batch,
                                   const BatchLayout& layout, bool with_heads = true);

enum class Precision { Double, Single };

/// Tape-free forward pass over chunks of normalized graphs with reused
/// workspaces. Double: same arithmetic as surrogate_forward up to summation
/// order. Single: weights and activations in float, outputs widened to double.
/// Snapshots the weights at construction; the model must outlive the engine.
class SurrogateInference {
public:
    /// Curve heads run over `chunk` graphs, message passing over `embed_chunk`.
    explicit SurrogateInference(const SurrogateModel& model, Precision precision = Precision::Double,
                                std::size_t chunk = 128, std::size_t embed_chunk = 16);
    ~SurrogateInference();
    SurrogateInference(SurrogateInference&&) noexcept;
    SurrogateInference& operator=(SurrogateInference&&) noexcept;

    /// Any of the outputs may be null. curves: graphs x (generators * points);
    /// state: graphs x 2 embed; gen: (graphs * gen_count) x embed.
    void run(const std::vector<const HeteroGraph*>& graphs, Matrix* curves, Matrix* state = nullptr, Matrix* gen = nullptr);
    /// Inverse-transformed curves in degrees, origin Predicted, and optionally
    /// the pooled state embeddings.
    std::vector<AngleCurveSet> curves(const std::vector<const HeteroGraph*>& graphs, double dt_out,
                                      Matrix* state = nullptr);

    struct Engine;

private:
    std::unique_ptr<Engine> engine_;
};

/// Normalizes a raw graph with the model's stats (copies when already normalized).
HeteroGraph prepare_graph(const SurrogateModel& model, const HeteroGraph& graph);

struct Embedding {
    Matrix state;  // rows: graphs, cols: 2 * embed
    std::vector<Matrix> gen;  // per graph: gen_count x embed
};
Embedding embed(SurrogateModel& model, const std::vector<HeteroGraph>& graphs);

/// Transformed head outputs, one row per graph, generator-major.
Matrix predict_transformed(SurrogateModel& model, const std::vector<HeteroGraph>& graphs, std::size_t chunk = 128,
                           Precision precision = Precision::Double);

/// Angle curves in degrees (inverse-transformed), origin Predicted.
std::vector<AngleCurveSet> predict_curves(SurrogateModel& model, const std::vector<HeteroGraph>& graphs,
                                          Precision precision = Precision::Single);
AngleCurveSet curves_from_transformed(const double* row, std::size_t generators, std::size_t points, double dt_out);

struct SurrogateMetrics {
    double mpec = 0.0;  // percent
    double f1 = 0.0, acc = 0.0, tnr = 0.0, tpr = 0.0;  // percent, unstable is the positive class
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::size_t count = 0;

    /// Ratios with an empty denominator count as 100 %.
    static SurrogateMetrics from_confusion(std::size_t tp, std::size_t tn, std::size_t fp, std::size_t fn);
};

/// Mean relative curve error in degrees with |y| floored at `mpec_floor_deg`.
double mpec(const std::vector<double>& truth_transformed, const std::vector<double>& pred_transformed,
            double mpec_floor_deg = 1.0);

SurrogateMetrics surrogate_metrics(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records);
std::string format_metrics(const SurrogateMetrics& m);

struct SurrogateTrainConfig {
    double lr = 0.01;
    double lr_decay = 0.1;
    std::size_t decay_every = 10;  // epochs
    std::size_t batch = 512;
    std::size_t max_epochs = 60;
    std::size_t patience = 5;
    std::uint64_t seed = 1;
    SurrogateConfig model;

    static SurrogateTrainConfig paper() { return {}; }
    /// Same update budget before the first decay as the paper-scale profile on its
    /// dataset: smaller batches and a slower decay for ~1,500 train records.
    static SurrogateTrainConfig desk()
    {
        SurrogateTrainConfig c;
        c.batch = 32;
        c.decay_every = 30;
        c.max_epochs = 90;
        c.patience = 10;
        return c;
    }
};

struct EpochLog {
    std::size_t epoch = 0;  // 0: before any update
    double lr = 0.0;
    double train_mse = 0.0;
    double validation_mse = 0.0;
};

struct SurrogateTrainResult {
    SurrogateModel model;
    std::vector<EpochLog> history;
    std::size_t best_epoch = 0;
    SurrogateMetrics validation;
    SurrogateMetrics test;
    DatasetSplit split;
};

/// Mean squared error of the transformed labels over the listed records.
double surrogate_mse(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records);

SurrogateTrainResult train_surrogate(const NetworkCase& net, const Dataset& data, const SurrogateTrainConfig& config,
                                     const ProgressFn& log = {});

/// Fits on `records` only for a fixed number of full-batch-or-minibatch steps
/// at a constant learning rate (overfit probe).
void fit_steps(SurrogateModel& model, const Dataset& data, const std::vector<std::size_t>& records, std::size_t steps,
               double lr, std::size_t batch, Rng& rng);

void save_surrogate(const SurrogateModel& model, const std::string& path);
SurrogateModel load_surrogate(const NetworkCase& net, const std::string& path);

}  // namespace gd2rl
