#pragma once

// One-hidden-layer tanh regressor with a flat parameter vector and
// hand-written backprop for both the weights and the inputs.

#include "afto/core.hpp"

#include <random>

namespace afto {

/// Layout of w: W1 (hidden x inputs, row-major), b1 (hidden), w2 (hidden), b2.
struct Mlp {
  Eigen::Index inputs = 1;
  Eigen::Index hidden = 16;

  Eigen::Index params() const { return hidden * inputs + 2 * hidden + 1; }

  struct Parts {
    Mat W1;
    Vec b1, w2;
    double b2 = 0.0;
  };

  Parts unpack(const Vec& w) const {
    if (w.size() != params()) throw DimensionError("mlp: parameter vector has wrong length");
    Parts p;
    p.W1 = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        w.data(), hidden, inputs);
    p.b1 = w.segment(hidden * inputs, hidden);
    p.w2 = w.segment(hidden * inputs + hidden, hidden);
    p.b2 = w[params() - 1];
    return p;
  }

  Vec pack(const Parts& p) const {
    Vec w(params());
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data(), hidden, inputs) =
        p.W1;
    w.segment(hidden * inputs, hidden) = p.b1;
    w.segment(hidden * inputs + hidden, hidden) = p.w2;
    w[params() - 1] = p.b2;
    return w;
  }

  Vec predict(const Vec& w, const Mat& X) const {
    if (X.cols() != inputs) throw DimensionError("mlp: input width mismatch");
    const Parts p = unpack(w);
    const Mat H = ((X * p.W1.transpose()).rowwise() + p.b1.transpose()).array().tanh().matrix();
    return (H * p.w2).array() + p.b2;
  }

  /// Mean squared error and, optionally, its gradient in w and in X.
  double mse(const Vec& w, const Mat& X, const Vec& y, Vec* gw = nullptr, Mat* gX = nullptr) const {
    if (X.cols() != inputs) throw DimensionError("mlp: input width mismatch");
    if (X.rows() != y.size()) throw DimensionError("mlp: target length mismatch");
    if (X.rows() == 0) throw ConfigError("mlp: empty batch");
    const Parts p = unpack(w);
    const Mat H = ((X * p.W1.transpose()).rowwise() + p.b1.transpose()).array().tanh().matrix();
    const Vec r = (H * p.w2).array() + p.b2 - y.array();
    const double n = static_cast<double>(X.rows());
    if (gw || gX) {
      const Vec g = (2.0 / n) * r;
      const Mat dA = ((g * p.w2.transpose()).array() * (1.0 - H.array().square())).matrix();
      if (gw) {
        Parts d;
        d.W1 = dA.transpose() * X;
        d.b1 = dA.colwise().sum().transpose();
        d.w2 = H.transpose() * g;
        d.b2 = g.sum();
        *gw = pack(d);
      }
      if (gX) *gX = dA * p.W1;
    }
    return r.squaredNorm() / n;
  }

  /// Gaussian init with standard deviation scale / sqrt(fan_in).
  Vec init(std::uint64_t seed, double scale = 1.0) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Parts p;
    p.W1.resize(hidden, inputs);
    for (Eigen::Index r = 0; r < hidden; ++r)
      for (Eigen::Index c = 0; c < inputs; ++c) p.W1(r, c) = gauss(rng) * scale / std::sqrt(double(inputs));
    p.b1 = Vec::Zero(hidden);
    p.w2.resize(hidden);
    for (Eigen::Index r = 0; r < hidden; ++r) p.w2[r] = gauss(rng) * scale / std::sqrt(double(hidden));
    p.b2 = 0.0;
    return pack(p);
  }
};

/// sum_k sqrt(w_k^2 + delta^2) - delta
inline double smoothed_l1(const Vec& w, double delta) {
  return ((w.array().square() + delta * delta).sqrt() - delta).sum();
}

inline Vec smoothed_l1_grad(const Vec& w, double delta) {
  return (w.array() / (w.array().square() + delta * delta).sqrt()).matrix();
}

}  // namespace afto
