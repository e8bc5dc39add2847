#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "gd2rl/power_flow.hpp"

namespace gd2rl {

/// Rotor-angle trajectories, generator-major, in degrees. Point k holds the
/// angle at t = (k + 1) * dt_out.
struct AngleCurveSet {
    enum class Origin { Simulated, Predicted };

    std::size_t generators = 0;
    std::size_t points = 0;
    double dt_out = 0.1;
    std::vector<double> angles;
    Origin origin = Origin::Simulated;
    bool runaway = false;  // integration stopped at the angle cap; tail holds the last value

    AngleCurveSet() = default;
    AngleCurveSet(std::size_t n_gen, std::size_t n_points, Origin o = Origin::Simulated)
        : generators(n_gen), points(n_points), angles(n_gen * n_points, 0.0), origin(o)
    {
    }

    double& at(std::size_t g, std::size_t t) { return angles[g * points + t]; }
    double at(std::size_t g, std::size_t t) const { return angles[g * points + t]; }
};

struct SimConfig {
    double h_step = 0.005;  // s
    double t_end = 10.0;
    double dt_out = 0.1;
    double frequency_hz = 60.0;
    double fault_impedance = 1e-6;  // pu, shunt to ground at the fault point
    double instability_angle_cap = 20000.0;  // degrees, integration guard only

    std::size_t points() const;
    void validate() const;
};

class SingularReductionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class NetworkStage { Prefault, Fault, Postfault };

/// Network reduced to the generator internal nodes: loads become constant
/// admittances at their solved voltages, machines sit behind xd'. The fault
/// stage splits the faulted line at the fault location and grounds that
/// point; the postfault stage drops the line.
ComplexMatrix kron_reduce(const NetworkCase& net, const PowerFlowSolution& solution, NetworkStage stage,
                          const Contingency& contingency, double fault_impedance = 1e-6);

/// Internal EMFs behind xd' from the solved terminal conditions, pu.
ComplexVector internal_emfs(const NetworkCase& net, const PowerFlowSolution& solution);

/// Classical multi-machine model ready for integration.
struct SwingSystem {
    std::vector<double> h;       // s
    std::vector<double> d;       // pu
    std::vector<double> p_mech;  // pu
    std::vector<double> emf;     // |E|, pu
    std::vector<double> delta0;  // rad
    ComplexMatrix y_prefault;
    ComplexMatrix y_fault;
    ComplexMatrix y_postfault;
    double t_clear = 0.0;  // fault-on interval is [0, t_clear)
    bool faulted = false;

    std::size_t size() const { return h.size(); }
};

SwingSystem build_swing_system(const NetworkCase& net, const PowerFlowSolution& solution,
                               const Contingency& contingency, const SimConfig& config = {});

/// Electrical output of every machine for the given reduced network, pu.
std::vector<double> electrical_power(const ComplexMatrix& y_reduced, const std::vector<double>& emf,
                                     const std::vector<double>& delta);

/// Observer receives (t, delta [rad], speed deviation [pu]) after every step.
using SwingObserver =
    std::function<void(double, const std::vector<double>&, const std::vector<double>&)>;

/// Fixed-step RK4 through the fault and postfault stages. Steps are shortened
/// so that the clearing instant and every output instant are hit exactly.
AngleCurveSet integrate_swing(const SwingSystem& system, const SimConfig& config = {},
                              const SwingObserver& observer = {});

/// Ground-truth time-domain simulation of one state and contingency.
AngleCurveSet simulate(const NetworkCase& net, const PowerFlowSolution& solution, const Contingency& contingency,
                       const SimConfig& config = {});

/// Largest pairwise rotor-angle separation over all output points, degrees.
double max_angle_separation(const AngleCurveSet& curves);

/// (360 - sep) / (360 + sep).
double tsi_from_separation(double separation_deg);
double tsi(const AngleCurveSet& curves);

/// Logarithmic label transform and its reverse.
double forward_transform(double y);
double inverse_transform(double y_hat);

}  // namespace gd2rl
