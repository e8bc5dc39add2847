#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gd2rl {

/// Random engine used everywhere a stochastic draw is made. Callers own the
/// engine; parallel workers each hold their own stream.
using Rng = std::mt19937_64;

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class BusKind { Slack, PV, PQ };

struct BusRecord {
    int id = 0;
    BusKind kind = BusKind::PQ;
    double v_setpoint = 1.0;  // pu, meaningful for slack/pv buses
    double p_load = 0.0;      // MW
    double q_load = 0.0;      // MVAr
    double v_min = 0.94;
    double v_max = 1.06;
};

struct GeneratorRecord {
    int bus = 0;
    double p_out = 0.0;  // MW
    double p_min = 0.0;
    double p_max = 0.0;
    double h = 0.0;      // inertia constant, s on the system base
    double xdp = 0.0;    // transient reactance, pu
    double d = 0.0;      // damping, pu power / pu speed
    double cost = 0.0;   // redispatch cost, $/MW
    bool adjustable = true;
};

enum class PvDistribution { TruncatedNormal, Uniform };

struct PvRecord {
    int bus = 0;
    double p_mean = 0.0;  // MW
    double sigma = 0.0;   // MW; half-width for the uniform distribution
    double p_cap = 0.0;   // MW
    PvDistribution distribution = PvDistribution::TruncatedNormal;
};

/// AC line. Ids follow the line numbering used for contingencies.
struct BranchRecord {
    int id = 0;
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;  // total line charging
    bool faultable = true;
};

/// Two-winding transformer with a fixed off-nominal ratio on the from side.
struct TransformerRecord {
    int id = 0;
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;
    double tap = 1.0;
};

/// Series element in bus-index space, the common view of lines and
/// transformers used by the solvers and the graph builder.
struct SeriesElement {
    std::size_t from = 0;
    std::size_t to = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;
    double tap = 1.0;
    int line_id = 0;  // 0 for transformers
};

class NetworkCase {
public:
    std::vector<BusRecord> buses;
    std::vector<BranchRecord> branches;
    std::vector<TransformerRecord> transformers;
    std::vector<GeneratorRecord> generators;
    std::vector<PvRecord> pv_units;
    double base_mva = 100.0;

    /// Checks every invariant and builds the index tables. Throws
    /// ValidationError naming the offending record.
    void finalize();

    std::size_t bus_index(int bus_id) const;
    std::size_t slack_bus() const { return slack_bus_; }
    std::size_t slack_generator() const { return slack_gen_; }
    const std::vector<SeriesElement>& elements() const { return elements_; }
    /// Indices into `generators` of the adjustable machines, in file order.
    const std::vector<std::size_t>& adjustable() const { return adjustable_; }
    std::size_t line_position(int line_id) const;
    /// Element index of an AC line inside elements().
    std::size_t line_element(int line_id) const;
    std::vector<int> faultable_lines() const;
    /// True when every bus is reachable from the slack, optionally with one
    /// series element removed.
    bool connected_without(std::size_t removed_element) const;
    bool connected() const;

private:
    std::vector<int> id_to_index_;
    std::vector<SeriesElement> elements_;
    std::vector<std::size_t> adjustable_;
    std::size_t slack_bus_ = 0;
    std::size_t slack_gen_ = 0;
};

/// Three-phase fault at `location` along an AC line, cleared by permanently
/// removing the line at `t_clear`. A branch id of 0 means no disturbance.
struct Contingency {
    int branch_id = 0;
    double location = 0.5;
    double t_clear = 0.1;

    static Contingency none() { return Contingency{0, 0.5, 0.0}; }
    bool is_none() const { return branch_id == 0; }
};

void validate_contingency(const NetworkCase& net, const Contingency& c);

/// One deterministic injection profile.
struct OperatingState {
    std::vector<double> gen_p;   // MW per generator
    std::vector<double> gen_v;   // pu per generator
    std::vector<double> load_p;  // MW per bus
    std::vector<double> load_q;  // MVAr per bus
    std::vector<double> pv_p;    // MW per PV unit

    bool operator==(const OperatingState&) const = default;
};

/// Base state plus m Monte-Carlo PV realizations. Sample order is stable for
/// the lifetime of an episode.
struct ScenarioDistribution {
    OperatingState base;
    Contingency contingency;
    std::vector<OperatingState> samples;
    double level = 1.0;
};

NetworkCase load_case(const std::string& path);
NetworkCase parse_case(const std::string& text, const std::string& origin = "<string>");
std::string format_case(const NetworkCase& net);

/// Path of a case shipped under core/data (build tree) or the install prefix.
std::string shipped_case_path(const std::string& name = "case39_gd2rl.case");

OperatingState nominal_state(const NetworkCase& net);

struct BaseStateOptions {
    double load_spread = 0.10;     // +-10% per load
    double gen_spread = 0.10;      // +-10% per generator and PV mean
    double voltage_spread = 0.05;  // +-5% per generator setpoint
    double loss_allowance = 0.03;
};

/// The nine stress levels 0.80, 0.85, ..., 1.20.
std::vector<double> stress_levels();

OperatingState sample_base_state(const NetworkCase& net, double level, Rng& rng,
                                 const BaseStateOptions& options = {});

/// Changes the adjustable machines' total output by `change_mw`, split in
/// proportion to their current outputs. Each machine is clamped to its
/// limits afterwards; whatever the clamps refuse lands on the slack machine.
void rebalance_adjustable(const NetworkCase& net, OperatingState& state, double change_mw);

ScenarioDistribution sample_scenario(const NetworkCase& net, const OperatingState& base,
                                     const Contingency& contingency, std::size_t m, Rng& rng);

/// Adds `action_mw` to the adjustable machines and clamps to limits.
OperatingState apply_redispatch(const NetworkCase& net, const OperatingState& state,
                                const std::vector<double>& action_mw);

/// Scheduled generation minus load, MW (PV counted as generation).
double net_injection(const OperatingState& state);

}  // namespace gd2rl
