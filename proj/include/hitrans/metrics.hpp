#pragma once

#include "hitrans/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>

namespace hitrans {

/// Binary raster, rows = height. Nonzero means foreground.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// |a ∩ b| / |a ∪ b|; two empty masks score 1.
inline double jaccard(const Mask& pred, const Mask& truth) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
        throw ShapeError("jaccard: mask sizes differ (" + std::to_string(pred.rows()) + "x" +
                         std::to_string(pred.cols()) + " vs " + std::to_string(truth.rows()) + "x" +
                         std::to_string(truth.cols()) + ")");
    }
    const auto p = pred != 0;
    const auto t = truth != 0;
    const Index inter = (p && t).count();
    const Index uni = (p || t).count();
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Pixels whose probability exceeds `threshold`, from a (H, W) logit plane.
template <typename Derived>
Mask threshold_logits(const Eigen::DenseBase<Derived>& logits, double threshold) {
    Mask m(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        for (Index c = 0; c < logits.cols(); ++c) {
            m(r, c) = sigmoid(static_cast<double>(logits(r, c))) > threshold ? 1 : 0;
        }
    }
    return m;
}

}  // namespace hitrans
