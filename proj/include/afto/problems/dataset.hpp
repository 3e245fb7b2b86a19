#pragma once

// Regression datasets: CSV ingestion, seeded split, train-statistics
// standardization, round-robin sharding, and a synthetic linear generator.

#include "afto/core.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace afto {

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct RegressionDataset {
  Mat X;  // all rows, standardized with train statistics
  Vec y;  // standardized with train statistics as well
  std::vector<std::size_t> train, val, test;
  std::vector<std::vector<std::size_t>> train_shards, val_shards;
  double noise_sigma = 0.1;
  std::uint64_t noise_seed = 0;
  Vec feature_mean, feature_std;
  double target_mean = 0.0, target_std = 1.0;

  std::size_t rows() const { return static_cast<std::size_t>(X.rows()); }
  Eigen::Index features() const { return X.cols(); }
  std::size_t workers() const { return train_shards.size(); }

  Mat rows_of(const std::vector<std::size_t>& idx) const {
    Mat out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = X.row(static_cast<Eigen::Index>(idx[k]));
    return out;
  }
  Vec targets_of(const std::vector<std::size_t>& idx) const {
    Vec out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = y[static_cast<Eigen::Index>(idx[k])];
    return out;
  }

  /// Test inputs plus seeded Gaussian noise of level noise_sigma.
  Mat noisy_test() const {
    Mat Xt = rows_of(test);
    if (noise_sigma == 0.0) return Xt;
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, noise_sigma);
    for (Eigen::Index r = 0; r < Xt.rows(); ++r)
      for (Eigen::Index c = 0; c < Xt.cols(); ++c) Xt(r, c) += gauss(rng);
    return Xt;
  }
};

/// Builds a dataset from raw rows (last column = target).
inline RegressionDataset make_dataset(const Mat& raw, SplitRatios ratios, std::uint64_t seed, std::size_t N,
                                      double noise_sigma = 0.1) {
  if (raw.cols() < 2) throw ConfigError("dataset: need at least one feature column and a target column");
  if (!raw.allFinite()) throw ConfigError("dataset: non-finite entries");
  if (N < 1) throw ConfigError("dataset: worker count must be >= 1");
  if (noise_sigma < 0) throw ConfigError("dataset: noise sigma must be nonnegative");
  if (ratios.train <= 0 || ratios.val <= 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw ConfigError("dataset: split ratios must be positive and sum to 1");
  const std::size_t n = static_cast<std::size_t>(raw.rows());
  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * double(n)));
  if (n_train < N || n_val < N || n_train + n_val > n || (ratios.test > 0 && n_train + n_val == n))
    throw ConfigError("dataset: too few rows (" + std::to_string(n) + ") for the requested splits and " +
                      std::to_string(N) + " workers");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  RegressionDataset ds;
  ds.noise_sigma = noise_sigma;
  ds.noise_seed = seed ^ 0x9e3779b97f4a7c15ull;
  const Eigen::Index f = raw.cols() - 1;
  ds.X.resize(static_cast<Eigen::Index>(n), f);
  ds.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    ds.X.row(static_cast<Eigen::Index>(k)) = raw.row(static_cast<Eigen::Index>(order[k])).head(f);
    ds.y[static_cast<Eigen::Index>(k)] = raw(static_cast<Eigen::Index>(order[k]), f);
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (k < n_train) ds.train.push_back(k);
    else if (k < n_train + n_val) ds.val.push_back(k);
    else ds.test.push_back(k);
  }

  const Mat Xtr = ds.rows_of(ds.train);
  ds.feature_mean = Xtr.colwise().mean().transpose();
  ds.feature_std = ((Xtr.rowwise() - ds.feature_mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (Eigen::Index c = 0; c < f; ++c)
    if (!(ds.feature_std[c] > 0)) ds.feature_std[c] = 1.0;  // constant column: center only
  ds.X = ((ds.X.rowwise() - ds.feature_mean.transpose()).array().rowwise() / ds.feature_std.transpose().array())
             .matrix();
  const Vec ytr = ds.targets_of(ds.train);
  ds.target_mean = ytr.mean();
  ds.target_std = std::sqrt((ytr.array() - ds.target_mean).square().mean());
  if (!(ds.target_std > 0)) ds.target_std = 1.0;
  ds.y = (ds.y.array() - ds.target_mean) / ds.target_std;

  ds.train_shards.assign(N, {});
  ds.val_shards.assign(N, {});
  for (std::size_t k = 0; k < ds.train.size(); ++k) ds.train_shards[k % N].push_back(ds.train[k]);
  for (std::size_t k = 0; k < ds.val.size(); ++k) ds.val_shards[k % N].push_back(ds.val[k]);
  return ds;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_number(std::string s, double& out) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return false;
  s = s.substr(b, e - b + 1);
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}
}  // namespace detail

/// Parses a comma-separated file of numbers. A first row containing any
/// non-numeric cell is taken as a header.
inline Mat read_csv_matrix(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    std::vector<double> vals(cells.size());
    std::size_t bad = cells.size();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!detail::parse_number(cells[c], vals[c])) {
        bad = c;
        break;
      }
    }
    if (bad < cells.size()) {
      if (rows.empty() && width == 0) {
        width = cells.size();  // header
        continue;
      }
      throw ConfigError("dataset: non-numeric cell at row " + std::to_string(lineno) + ", column " +
                        std::to_string(bad + 1));
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw ConfigError("dataset: row " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                        " columns, expected " + std::to_string(width));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw ConfigError("dataset: no data rows");
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < width; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

inline RegressionDataset load_dataset(const std::string& path, SplitRatios ratios, std::uint64_t seed,
                                      std::size_t N, double noise_sigma = 0.1) {
  std::ifstream is(path);
  if (!is) throw ConfigError("dataset: cannot open " + path);
  return make_dataset(read_csv_matrix(is), ratios, seed, N, noise_sigma);
}

struct SyntheticLinearSpec {
  std::size_t rows = 200;
  Eigen::Index features = 5;
  Eigen::Index latent = 2;       // features are noisy mixtures of this many factors
  double feature_noise = 0.1;    // independent noise on each feature
  double label_noise = 0.1;
  std::uint64_t seed = 0;
};

/// y = x^T beta + noise where x is a low-rank mixture plus small independent
/// noise; the near-collinearity makes unregularized fits sensitive to input noise.
inline Mat make_synthetic_linear(const SyntheticLinearSpec& s) {
  if (s.rows < 2 || s.features < 1 || s.latent < 1) throw ConfigError("synthetic data: invalid sizes");
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat mix(s.latent, s.features);
  for (Eigen::Index r = 0; r < mix.rows(); ++r)
    for (Eigen::Index c = 0; c < mix.cols(); ++c) mix(r, c) = gauss(rng);
  Vec beta(s.features);
  for (Eigen::Index c = 0; c < s.features; ++c) beta[c] = gauss(rng);
  Mat out(static_cast<Eigen::Index>(s.rows), s.features + 1);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    Vec u(s.latent);
    for (Eigen::Index k = 0; k < s.latent; ++k) u[k] = gauss(rng);
    Vec x = mix.transpose() * u;
    for (Eigen::Index c = 0; c < s.features; ++c) x[c] += s.feature_noise * gauss(rng);
    out.row(r).head(s.features) = x.transpose();
    out(r, s.features) = x.dot(beta) + s.label_noise * gauss(rng);
  }
  return out;
}

inline void write_csv_matrix(const Mat& m, std::ostream& os, const std::vector<std::string>& header = {}) {
  if (!header.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
    os << '\n';
  }
  os.precision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << m(r, c);
    os << '\n';
  }
}

}  // namespace afto
