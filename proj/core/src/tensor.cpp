#include "gd2rl/tensor.hpp"

#include <cmath>

namespace gd2rl {

std::string shape_string(Eigen::Index rows, Eigen::Index cols)
{
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

std::string shape_string(const Matrix& m) { return shape_string(m.rows(), m.cols()); }

ZScore zscore_fit(const Matrix& columns)
{
    ZScore z;
    const auto n = columns.rows();
    for (Eigen::Index c = 0; c < columns.cols(); ++c) {
        double mean = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) mean += columns(r, c);
        mean = n > 0 ? mean / static_cast<double>(n) : 0.0;
        double var = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) var += (columns(r, c) - mean) * (columns(r, c) - mean);
        double sd = n > 0 ? std::sqrt(var / static_cast<double>(n)) : 1.0;
        if (!(sd >= 1e-8)) sd = 1.0;
        z.mean.push_back(mean);
        z.std.push_back(sd);
    }
    return z;
}

void zscore_apply(Matrix& x, const ZScore& stats)
{
    if (static_cast<std::size_t>(x.cols()) != stats.mean.size())
        throw ShapeError("zscore_apply: " + shape_string(x) + " against " + std::to_string(stats.mean.size()) +
                         " statistics");
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const auto cu = static_cast<std::size_t>(c);
        x.col(c).array() = (x.col(c).array() - stats.mean[cu]) / stats.std[cu];
    }
}

}  // namespace gd2rl
