#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace tsteer {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using RowVec = Eigen::RowVectorXd;

/// Hidden states at one layer: variates x tokens x width, row-major.
struct ActivationTensor {
    int layer = 0;
    std::size_t variates = 0;
    std::size_t tokens = 0;
    std::size_t width = 0;
    std::vector<double> data;

    ActivationTensor() = default;
    ActivationTensor(int layer, std::size_t n, std::size_t t, std::size_t d)
        : layer(layer), variates(n), tokens(t), width(d), data(n * t * d, 0.0) {}

    double& at(std::size_t n, std::size_t t, std::size_t d) { return data[(n * tokens + t) * width + d]; }
    double at(std::size_t n, std::size_t t, std::size_t d) const { return data[(n * tokens + t) * width + d]; }

    /// tokens x width view of one variate.
    MatMap variate(std::size_t n) {
        return MatMap(data.data() + n * tokens * width, static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(width));
    }
    ConstMatMap variate(std::size_t n) const {
        return ConstMatMap(data.data() + n * tokens * width, static_cast<Eigen::Index>(tokens),
                           static_cast<Eigen::Index>(width));
    }

    bool same_shape(const ActivationTensor& o) const {
        return variates == o.variates && tokens == o.tokens && width == o.width;
    }
    bool all_finite() const;
};

}  // namespace tsteer
