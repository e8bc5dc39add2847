#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gd2rl {

/// Dense row-major 2-D array of doubles, the only value type of the tape.
/// Vectors are 1 x n rows; scalars are 1 x 1.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_string(Eigen::Index rows, Eigen::Index cols);
std::string shape_string(const Matrix& m);

/// Per-column mean and standard deviation (population). Columns with
/// std < 1e-8 get std 1 so they normalize to zero.
struct ZScore {
    std::vector<double> mean;
    std::vector<double> std;
};

ZScore zscore_fit(const Matrix& columns);
/// (x - mean) / std column by column, in place.
void zscore_apply(Matrix& x, const ZScore& stats);

}  // namespace gd2rl
