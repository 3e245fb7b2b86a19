#pragma once

// Distributed robust hyperparameter optimization as a trilevel problem.
//   x1 = phi    log-weight of the smoothed l1 regularizer (length 1)
//   x2 = p_j    per-sample input perturbation of worker j's training shard
//   x3 = w      MLP weights
//   f1_j = val MSE(w)
//   f2_j = -(train MSE(X_j + P_j; w) - c ||p_j||^2)
//   f3_j = train MSE(X_j + P_j; w) + e^phi * smoothed_l1(w)
// p_j is stored row-major (sample, feature) and zero-padded to the longest shard.

#include "afto/core.hpp"
#include "afto/inner.hpp"
#include "afto/problems/dataset.hpp"
#include "afto/problems/mlp.hpp"

namespace afto {

struct RobustHpoSpec {
  std::vector<Eigen::Index> mlp_layers{16};  // hidden widths; one tanh layer is supported
  double c = 1.0;
  double smoothing = 1e-3;
  double init_scale = 1.0;
  double phi_init = -3.0;
  std::uint64_t init_seed = 0;
  std::array<double, 3> alphas{1e6, 1e6, 1e6};
  double mu = 0.0;

  void validate() const {
    if (!(c > 0)) throw ConfigError("robust hpo: c must be positive");
    if (!(smoothing > 0)) throw ConfigError("robust hpo: smoothing must be positive");
    if (mlp_layers.size() != 1 || mlp_layers[0] < 1)
      throw ConfigError("robust hpo: exactly one hidden layer of positive width is supported");
  }
};

class RobustHpoProblem final : public TrilevelProblem {
 public:
  RobustHpoProblem(const RegressionDataset& data, RobustHpoSpec spec)
      : TrilevelProblem(make_dims(data, spec), spec.alphas, spec.mu), spec_(std::move(spec)) {
    spec_.validate();
    mlp_.inputs = data.features();
    mlp_.hidden = spec_.mlp_layers[0];
    for (std::size_t j = 0; j < data.workers(); ++j) {
      Shard s;
      s.X = data.rows_of(data.train_shards[j]);
      s.y = data.targets_of(data.train_shards[j]);
      s.Xv = data.rows_of(data.val_shards[j]);
      s.yv = data.targets_of(data.val_shards[j]);
      shards_.push_back(std::move(s));
    }
  }

  const Mlp& mlp() const { return mlp_; }
  const RobustHpoSpec& spec() const { return spec_; }
  std::size_t shard_rows(std::size_t j) const { return static_cast<std::size_t>(shards_.at(j).X.rows()); }

  double value(Level level, std::size_t j, const Blocks& x) const override {
    const Shard& s = shard(j);
    const Vec& w = x[2];
    switch (level) {
      case Level::one:
        return mlp_.mse(w, s.Xv, s.yv);
      case Level::two:
        return -(mlp_.mse(w, perturbed(s, x[1]), s.y) - spec_.c * x[1].squaredNorm());
      case Level::three:
        return mlp_.mse(w, perturbed(s, x[1]), s.y) + std::exp(x[0][0]) * smoothed_l1(w, spec_.smoothing);
    }
    return 0.0;
  }

  Vec gradient(Level level, std::size_t j, Block b, const Blocks& x) const override {
    const Shard& s = shard(j);
    const Vec& w = x[2];
    const auto bi = index(b);
    if (level == Level::one) {
      if (b != Block::three) return Vec::Zero(x[bi].size());
      Vec gw;
      mlp_.mse(w, s.Xv, s.yv, &gw);
      return gw;
    }
    if (level == Level::three && b == Block::one)
      return Vec::Constant(1, std::exp(x[0][0]) * smoothed_l1(w, spec_.smoothing));
    if (b == Block::one) return Vec::Zero(x[0].size());
    Vec gw;
    Mat gX;
    mlp_.mse(w, perturbed(s, x[1]), s.y, b == Block::three ? &gw : nullptr, b == Block::two ? &gX : nullptr);
    const double sign = level == Level::two ? -1.0 : 1.0;
    if (b == Block::two) {
      Vec g = Vec::Zero(x[1].size());
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(g.data(), gX.rows(),
                                                                                          gX.cols()) = sign * gX;
      if (level == Level::two) g += 2.0 * spec_.c * x[1];
      return g;
    }
    if (level == Level::three) gw += std::exp(x[0][0]) * smoothed_l1_grad(w, spec_.smoothing);
    return sign * gw;
  }

  bool has_second_derivatives() const override { return true; }

  Vec hessian_vector(Level level, std::size_t j, Block out, Block in, const Blocks& x, const Vec& v) const override {
    return gradient_difference_hvp(level, j, out, in, x, v);
  }

  std::string name() const override { return "robust_hpo"; }

  /// phi = phi_init, p = 0, w = seeded MLP init, replicated across workers.
  PrimalState initial_state() const {
    PrimalState st = PrimalState::zeros(dims_);
    st.z[0] = Vec::Constant(1, spec_.phi_init);
    st.z[2] = mlp_.init(spec_.init_seed, spec_.init_scale);
    for (std::size_t i : {0u, 2u}) st.x[i].assign(dims_.workers, st.z[i]);
    return st;
  }

 private:
  struct Shard {
    Mat X, Xv;
    Vec y, yv;
  };

  static Dims make_dims(const RegressionDataset& data, const RobustHpoSpec& spec) {
    spec.validate();
    if (data.workers() < 1) throw ConfigError("robust hpo: dataset has no shards");
    std::size_t longest = 0;
    for (std::size_t j = 0; j < data.workers(); ++j) {
      if (data.train_shards[j].empty() || data.val_shards[j].empty())
        throw ConfigError("robust hpo: empty partition for worker " + std::to_string(j + 1));
      longest = std::max(longest, data.train_shards[j].size());
    }
    Mlp m;
    m.inputs = data.features();
    m.hidden = spec.mlp_layers[0];
    return Dims{1, longest * static_cast<std::size_t>(data.features()), static_cast<std::size_t>(m.params()),
                data.workers()};
  }

  const Shard& shard(std::size_t j) const {
    if (j >= shards_.size()) throw DimensionError("robust hpo: worker index out of range");
    return shards_[j];
  }

  Mat perturbed(const Shard& s, const Vec& p) const {
    if (p.size() != static_cast<Eigen::Index>(dims_.d2)) throw DimensionError("robust hpo: p has wrong length");
    return s.X + Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                     p.data(), s.X.rows(), s.X.cols());
  }

  RobustHpoSpec spec_;
  Mlp mlp_;
  std::vector<Shard> shards_;
};

struct ModelScores {
  double mse_clean = 0.0;
  double mse_noisy = 0.0;
};

inline ModelScores evaluate_model(const Mlp& mlp, const Vec& w, const RegressionDataset& data) {
  if (w.size() != mlp.params()) throw DimensionError("evaluate_model: weight length does not match the MLP");
  const Vec yt = data.targets_of(data.test);
  return {mlp.mse(w, data.rows_of(data.test), yt), mlp.mse(w, data.noisy_test(), yt)};
}

inline ModelScores evaluate_model(const RobustHpoProblem& p, const Vec& w, const RegressionDataset& data) {
  return evaluate_model(p.mlp(), w, data);
}

/// Weights defined by the innermost problem at the state's (phi, p): a K-round
/// level-3 solve started from the state's own x3/z3 copies.
inline Vec level3_model(const TrilevelProblem& p, const PrimalState& st, const InnerConfig& cfg) {
  InnerState init = InnerState::zeros(p.dims().workers, p.dims().d3);
  init.x = st.x[2];
  init.z = st.z[2];
  return solve_level3(p, st.z[0], st.z[1], &init, cfg).final_state().z;
}

}  // namespace afto
