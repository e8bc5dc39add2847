#pragma once

#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "gd2rl/grid.hpp"

namespace gd2rl {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;

/// Bus admittance matrix (pu). Elements listed in `removed` are left out.
ComplexMatrix build_ybus(const NetworkCase& net, const std::vector<std::size_t>& removed = {});

struct BranchFlow {
    double p_from = 0.0;  // MW leaving the from bus into the element
    double q_from = 0.0;
    double p_to = 0.0;    // MW leaving the to bus into the element
    double q_to = 0.0;

    bool operator==(const BranchFlow&) const = default;
};

struct PowerFlowSolution {
    std::vector<double> v_mag;  // pu
    std::vector<double> v_ang;  // rad, slack at 0
    std::vector<double> p_inj;  // MW net injection per bus
    std::vector<double> q_inj;  // MVAr
    std::vector<double> gen_p;  // MW per generator (slack from the solution)
    std::vector<double> gen_q;  // MVAr per generator
    std::vector<BranchFlow> branch_pq;  // per series element, same order as NetworkCase::elements()
    double p_slack = 0.0;
    double max_mismatch = 0.0;  // pu
    int iterations = 0;
    bool converged = false;

    bool operator==(const PowerFlowSolution&) const = default;
};

struct PowerFlowOptions {
    double tolerance = 1e-8;  // pu, max |mismatch|
    int max_iterations = 20;
};

/// Polar-form mismatch equations of one operating state. The unknown vector
/// is [angles of non-slack buses ; magnitudes of PQ buses].
class PowerFlowModel {
public:
    PowerFlowModel(const NetworkCase& net, const OperatingState& state);

    Eigen::Index unknowns() const { return static_cast<Eigen::Index>(angle_buses_.size() + pq_buses_.size()); }

    /// Flat start (angles 0, PQ magnitudes 1) or the angles/magnitudes of a
    /// previous solution with matching dimensions.
    Eigen::VectorXd initial_guess(const PowerFlowSolution* warm = nullptr) const;

    /// f(x) = S_calc - S_spec restricted to the scheduled components, pu.
    Eigen::VectorXd mismatch(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const;

    ComplexVector voltages(const Eigen::VectorXd& x) const;
    const ComplexMatrix& ybus() const { return ybus_; }

private:
    const NetworkCase* net_;
    ComplexMatrix ybus_;
    std::vector<std::size_t> angle_buses_;
    std::vector<std::size_t> pq_buses_;
    std::vector<double> v_fixed_;  // magnitude at slack/pv buses
    Eigen::VectorXd p_spec_;       // pu per bus
    Eigen::VectorXd q_spec_;
};

/// Full Newton-Raphson. Never throws on divergence: a singular Jacobian or
/// the iteration cap returns converged = false.
PowerFlowSolution solve_power_flow(const NetworkCase& net, const OperatingState& state,
                                   const PowerFlowSolution* warm = nullptr, const PowerFlowOptions& options = {});

/// G_PF = R_P + R_V: negative sum of per-unit overshoot beyond generator P
/// limits and bus voltage limits. Zero without violations.
double violation_penalty(const PowerFlowSolution& solution, const NetworkCase& net);

inline constexpr double kPsiMin = -1.0;

/// v^PF: Psi_min if diverged, otherwise the penalty floored at Psi_min.
double pf_value(const PowerFlowSolution& solution, const NetworkCase& net);

/// Same as pf_value when the penalty is already known.
double pf_value(bool converged, double penalty);

}  // namespace gd2rl
