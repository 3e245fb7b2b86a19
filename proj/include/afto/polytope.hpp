#pragma once

// Linear cuts and the two polytopes of the hyper-polyhedral approximation.

#include "afto/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <optional>
#include <set>
#include <utility>

namespace afto {

/// Layer I cuts approximate the level-3 optimality constraint inside the level-2
/// problem; layer II cuts approximate the level-2 constraint in the outer problem.
enum class Layer { one, two };

inline const char* to_string(Layer l) { return l == Layer::one ? "I" : "II"; }

/// a^T z + sum b^T x <= c, stored densely.
///
/// a[i] multiplies consensus block z_{i+1} (z_2' for layer I). b[i][j]
/// multiplies x_{i+1,j}; layer I only populates b[2] (x_3), layer II populates
/// b[1] and b[2]. Unused slots are empty.
struct Cut {
  Layer layer = Layer::one;
  std::array<Vec, 3> a;
  std::array<std::vector<Vec>, 3> b;
  double c = 0.0;
  std::int64_t born_at = 0;
  std::uint64_t id = 0;

  static bool uses_local(Layer layer, Block blk) {
    if (layer == Layer::one) return blk == Block::three;
    return blk != Block::one;
  }

  void check_dims(const Dims& d) const {
    for (Block blk : kBlocks) {
      const auto n = static_cast<Eigen::Index>(d.size(blk));
      if (a[index(blk)].size() != n) throw DimensionError("cut: a coefficient size mismatch");
      const auto& bb = b[index(blk)];
      if (uses_local(layer, blk)) {
        if (bb.size() != d.workers) throw DimensionError("cut: b worker count mismatch");
        for (const auto& v : bb)
          if (v.size() != n) throw DimensionError("cut: b coefficient size mismatch");
      } else if (!bb.empty()) {
        throw DimensionError("cut: unexpected b coefficients for this layer");
      }
    }
  }

  bool finite() const {
    if (!std::isfinite(c)) return false;
    for (const auto& v : a)
      if (!all_finite(v)) return false;
    for (const auto& blk : b)
      for (const auto& v : blk)
        if (!all_finite(v)) return false;
    return true;
  }

  /// Left-hand side a^T z + sum b^T x at a full primal point.
  double lhs(const PrimalState& p) const {
    double s = 0.0;
    for (Block blk : kBlocks) {
      const std::size_t i = index(blk);
      if (a[i].size() != p.z[i].size()) throw DimensionError("cut_violation: consensus block size mismatch");
      s += a[i].dot(p.z[i]);
      const auto& bb = b[i];
      if (bb.empty()) continue;
      if (bb.size() != p.x[i].size()) throw DimensionError("cut_violation: worker count mismatch");
      for (std::size_t j = 0; j < bb.size(); ++j) {
        if (bb[j].size() != p.x[i][j].size()) throw DimensionError("cut_violation: local block size mismatch");
        s += bb[j].dot(p.x[i][j]);
      }
    }
    return s;
  }
};

/// (a.z + b.x) - c; <= 0 means the point satisfies the cut.
inline double cut_violation(const Cut& cut, const PrimalState& point) { return cut.lhs(point) - cut.c; }

class Polytope {
 public:
  Polytope() = default;
  explicit Polytope(Layer layer) : layer_(layer) {}

  Layer layer() const { return layer_; }
  std::size_t size() const { return cuts_.size(); }
  bool empty() const { return cuts_.empty(); }
  const std::vector<Cut>& cuts() const { return cuts_; }
  const Cut& operator[](std::size_t l) const { return cuts_[l]; }

  void add(Cut cut) {
    if (cut.layer != layer_) throw ConfigError("add_cut: cut layer does not match polytope layer");
    for (const auto& c : cuts_)
      if (c.id == cut.id) throw ConfigError("add_cut: duplicate cut id " + std::to_string(cut.id));
    cuts_.push_back(std::move(cut));
  }

  /// Keeps cuts whose flag is true, preserving order.
  void retain(const std::vector<bool>& keep) {
    if (keep.size() != cuts_.size()) throw DimensionError("polytope retain: mask length mismatch");
    std::vector<Cut> next;
    for (std::size_t l = 0; l < cuts_.size(); ++l)
      if (keep[l]) next.push_back(std::move(cuts_[l]));
    cuts_ = std::move(next);
  }

  bool contains(const PrimalState& p, double tol = 0.0) const {
    return std::all_of(cuts_.begin(), cuts_.end(),
                       [&](const Cut& c) { return cut_violation(c, p) <= tol; });
  }

 private:
  Layer layer_ = Layer::one;
  std::vector<Cut> cuts_;
};

inline Polytope add_cut(Polytope poly, Cut cut) {
  poly.add(std::move(cut));
  return poly;
}

struct DropResult {
  Polytope one;
  Polytope two;
  std::vector<double> gamma;   // re-indexed to the retained layer-I cuts
  std::vector<double> lambda;  // re-indexed to the retained layer-II cuts
  std::vector<std::uint64_t> dropped;
};

/// Removes layer-I cuts whose inner dual gamma_l^K is zero and layer-II cuts
/// whose outer dual lambda_l is zero. |dual| <= zero_tol counts as zero. Cuts
/// listed in `exempt` are never removed.
inline DropResult drop_inactive(const Polytope& poly1, std::span<const double> gamma_k,
                                const Polytope& poly2, std::span<const double> lambdas,
                                double zero_tol = 1e-10,
                                const std::set<std::uint64_t>& exempt = {}) {
  if (gamma_k.size() != poly1.size()) throw DimensionError("drop_inactive: gamma length mismatch");
  if (lambdas.size() != poly2.size()) throw DimensionError("drop_inactive: lambda length mismatch");
  DropResult out{poly1, poly2, {}, {}, {}};
  auto prune = [&](Polytope& poly, std::span<const double> duals, std::vector<double>& kept) {
    std::vector<bool> keep(poly.size());
    for (std::size_t l = 0; l < poly.size(); ++l) {
      const bool protect = exempt.count(poly[l].id) > 0;
      keep[l] = protect || std::abs(duals[l]) > zero_tol;
      if (keep[l])
        kept.push_back(duals[l]);
      else
        out.dropped.push_back(poly[l].id);
    }
    poly.retain(keep);
  };
  prune(out.one, gamma_k, out.gamma);
  prune(out.two, lambdas, out.lambda);
  return out;
}

// ---------------------------------------------------------------------------
// JSON snapshot

inline nlohmann::json vec_to_json(const Vec& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Vec vec_from_json(const nlohmann::json& j) {
  const auto vals = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline nlohmann::json to_json(const Cut& cut) {
  nlohmann::json j;
  j["id"] = cut.id;
  j["layer"] = to_string(cut.layer);
  j["born_at"] = cut.born_at;
  j["c"] = cut.c;
  j["a"] = nlohmann::json::array();
  for (const auto& v : cut.a) j["a"].push_back(vec_to_json(v));
  j["b"] = nlohmann::json::array();
  for (const auto& blk : cut.b) {
    auto arr = nlohmann::json::array();
    for (const auto& v : blk) arr.push_back(vec_to_json(v));
    j["b"].push_back(arr);
  }
  return j;
}

inline Cut cut_from_json(const nlohmann::json& j) {
  Cut c;
  c.id = j.at("id").get<std::uint64_t>();
  c.layer = j.at("layer").get<std::string>() == "I" ? Layer::one : Layer::two;
  c.born_at = j.at("born_at").get<std::int64_t>();
  c.c = j.at("c").get<double>();
  for (std::size_t i = 0; i < 3; ++i) {
    c.a[i] = vec_from_json(j.at("a").at(i));
    for (const auto& v : j.at("b").at(i)) c.b[i].push_back(vec_from_json(v));
  }
  return c;
}

inline nlohmann::json to_json(const Polytope& p) {
  nlohmann::json j;
  j["layer"] = to_string(p.layer());
  j["size"] = p.size();
  j["cuts"] = nlohmann::json::array();
  for (const auto& c : p.cuts()) j["cuts"].push_back(to_json(c));
  return j;
}

inline Polytope polytope_from_json(const nlohmann::json& j) {
  Polytope p(j.at("layer").get<std::string>() == "I" ? Layer::one : Layer::two);
  for (const auto& c : j.at("cuts")) p.add(cut_from_json(c));
  return p;
}

}  // namespace afto
