#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "nesyxil/autodiff.hpp"
#include "nesyxil/dataset.hpp"
#include "nesyxil/rules.hpp"

namespace testing_support {

using namespace nesyxil;

// Attributes drawn from a small palette so that rule atoms hit often.
inline SceneObject random_object(Rng& rng) {
  std::uniform_int_distribution<int> shape(0, 2), size(0, 1), material(0, 1), pick(0, 5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  static constexpr std::uint8_t palette[] = {0, 1, 2, 5, 6, 7};  // gray red blue purple cyan yellow
  static constexpr std::uint8_t greens[] = {3, 4};               // green brown
  SceneObject o;
  o.shape = static_cast<std::uint8_t>(shape(rng));
  o.size = static_cast<std::uint8_t>(size(rng));
  o.material = static_cast<std::uint8_t>(material(rng));
  const int c = pick(rng);
  o.color = c < 5 ? palette[c] : greens[unit(rng) < 0.5 ? 0 : 1];
  if (unit(rng) < 0.15) o.color = palette[static_cast<int>(unit(rng) * 6)];
  o.pos = {unit(rng), unit(rng), unit(rng)};
  return o;
}

inline std::vector<SceneObject> random_objects(Rng& rng, int max_n) {
  std::uniform_int_distribution<int> n(0, max_n);
  std::vector<SceneObject> out(static_cast<std::size_t>(n(rng)));
  for (auto& o : out) o = random_object(rng);
  return out;
}

// Exhaustive search over every injective map from demands to objects.
inline bool brute_force_branch(std::span<const SceneObject> objs, const ClassRule& rule) {
  std::vector<std::size_t> demands;
  for (std::size_t c = 0; c < rule.clauses.size(); ++c) {
    for (int i = 0; i < rule.clauses[c].min_count; ++i) demands.push_back(c);
  }
  if (demands.size() > objs.size()) return false;
  std::vector<std::size_t> chosen(demands.size());
  std::vector<bool> used(objs.size(), false);
  std::function<bool(std::size_t)> rec = [&](std::size_t d) -> bool {
    if (d == demands.size()) {
      for (const auto& r : rule.relations) {
        for (std::size_t i = 0; i < demands.size(); ++i) {
          for (std::size_t j = 0; j < demands.size(); ++j) {
            if (demands[i] == r.a && demands[j] == r.b && !in_front_of(objs[chosen[i]], objs[chosen[j]])) {
              return false;
            }
          }
        }
      }
      return true;
    }
    for (std::size_t o = 0; o < objs.size(); ++o) {
      if (used[o] || !matches_pattern(objs[o], rule.clauses[demands[d]])) continue;
      used[o] = true;
      chosen[d] = o;
      if (rec(d + 1)) return true;
      used[o] = false;
    }
    return false;
  };
  return rec(0);
}

inline bool brute_force(std::span<const SceneObject> objs, const ClassRule& rule) {
  return brute_force_branch(objs, rule) || (rule.alt && brute_force_branch(objs, *rule.alt));
}

// Every rule of both built-in specs, all splits.
inline std::vector<ClassRule> all_builtin_rules() {
  std::vector<ClassRule> out;
  for (const auto& spec : {clevr_hans3_spec(), clevr_hans7_spec()}) {
    for (const auto& c : spec.classes) {
      out.push_back(c.true_rule);
      for (const auto& r : c.rule_per_split) out.push_back(r);
    }
  }
  return out;
}

inline nesyxil::Tensor random_tensor(const nesyxil::Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  nesyxil::Tensor t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

// Largest relative error between analytic gradients of `f` (scalar) at the
// given leaves and central differences, over up to `max_coords` coordinates
// per leaf. Relative error uses max(|a|, |n|, floor) as denominator. Grad
// mode stays on while probing so `f` may take inner gradients itself.
inline double fd_max_rel_error(const std::function<ad::Var(const std::vector<ad::Var>&)>& f,
                               const std::vector<nesyxil::Tensor>& points, Rng& rng, std::size_t max_coords = 64,
                               double h = 1e-5, double floor = 1e-6) {
  std::vector<ad::Var> leaves;
  for (const auto& p : points) leaves.push_back(ad::Var::leaf(p));
  std::vector<nesyxil::Tensor> g = ad::grad_values(f(leaves), leaves);
  double worst = 0.0;
  for (std::size_t li = 0; li < points.size(); ++li) {
    std::vector<std::size_t> coords(points[li].numel());
    std::iota(coords.begin(), coords.end(), 0);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(coords.size(), max_coords));
    for (std::size_t c : coords) {
      auto eval = [&](double delta) {
        std::vector<ad::Var> vs;
        for (std::size_t j = 0; j < points.size(); ++j) {
          nesyxil::Tensor t = points[j];
          if (j == li) t[c] += delta;
          vs.push_back(ad::Var::constant(t));
        }
        return f(vs).item();
      };
      const double num = (eval(h) - eval(-h)) / (2 * h);
      const double ana = g[li][c];
      const double denom = std::max({std::abs(num), std::abs(ana), floor});
      worst = std::max(worst, std::abs(num - ana) / denom);
    }
  }
  return worst;
}

}  // namespace testing_support
