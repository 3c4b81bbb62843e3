#pragma once

// Central finite-difference gradient checking against the reverse-mode tape.
// The probe loss is sum(r ⊙ out) with fixed random r, so every output element
// influences the scalar being differentiated.

#include <cmath>
#include <functional>
#include <vector>

#include "softmodnet/diffcore.hpp"
#include "softmodnet/util.hpp"

namespace gradcheck {

using softmodnet::Graph;
using softmodnet::Rng;
using softmodnet::Shape;
using softmodnet::Tensor;

// Builds the op under test from the leaf tensors; returns its output.
using BuildFn = std::function<Tensor<double>(Graph<double>&,
                                             const std::vector<Tensor<double>>&)>;

inline std::vector<std::vector<double>> random_leaves(
    const std::vector<Shape>& shapes, Rng& rng, double lo = -1.0,
    double hi = 1.0) {
  std::vector<std::vector<double>> values;
  values.reserve(shapes.size());
  for (const auto& s : shapes) {
    std::vector<double> v(softmodnet::numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    values.push_back(std::move(v));
  }
  return values;
}

// Pushes paired elements apart so min/max kinks sit away from the FD stencil.
inline void separate_pairs(std::vector<double>& a, std::vector<double>& b,
                           double gap = 1e-3) {
  size_t n = std::min(a.size(), b.size());
  for (size_t i = 0; i < n; ++i) {
    size_t ib = i % b.size();
    if (std::fabs(a[i] - b[ib]) < gap) a[i] += (a[i] >= b[ib] ? gap : -gap);
  }
}

struct Result {
  double max_rel = 0.0;
  int worst_leaf = -1;
  int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;

  bool ok(double tol = 1e-4) const { return max_rel <= tol; }
};

inline Result check(const std::vector<Shape>& shapes,
                    const std::vector<std::vector<double>>& values,
                    const BuildFn& build, uint64_t probe_seed,
                    double h = 1e-5) {
  auto eval_loss = [&](const std::vector<std::vector<double>>& vals,
                       std::vector<std::vector<double>>* grads) {
    Graph<double> g;
    std::vector<Tensor<double>> leaves;
    leaves.reserve(shapes.size());
    for (size_t i = 0; i < shapes.size(); ++i)
      leaves.push_back(g.variable(shapes[i], vals[i]));
    Tensor<double> out = build(g, leaves);
    Rng pr(probe_seed);
    std::vector<double> r(out.size());
    for (auto& x : r) x = pr.uniform(-1.0, 1.0);
    Tensor<double> probe = g.constant(out.shape(), r);
    Tensor<double> loss = softmodnet::sum_all(softmodnet::mul(out, probe));
    double lv = loss.value()[0];
    if (grads) {
      g.backward(loss);
      grads->clear();
      for (auto& leaf : leaves) grads->push_back(g.grad(leaf.id));
    }
    return lv;
  };

  std::vector<std::vector<double>> analytic;
  eval_loss(values, &analytic);

  Result res;
  std::vector<std::vector<double>> work = values;
  for (size_t li = 0; li < shapes.size(); ++li) {
    for (size_t e = 0; e < work[li].size(); ++e) {
      const double keep = work[li][e];
      work[li][e] = keep + h;
      const double lp = eval_loss(work, nullptr);
      work[li][e] = keep - h;
      const double lm = eval_loss(work, nullptr);
      work[li][e] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[li][e];
      const double denom = std::max({std::fabs(an), std::fabs(fd), 1e-3});
      const double rel = std::fabs(an - fd) / denom;
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst_leaf = static_cast<int>(li);
        res.worst_index = static_cast<int64_t>(e);
        res.analytic = an;
        res.numeric = fd;
      }
    }
  }
  return res;
}

inline Result check_random(const std::vector<Shape>& shapes,
                           const BuildFn& build, uint64_t seed) {
  Rng rng(seed);
  auto values = random_leaves(shapes, rng);
  return check(shapes, values, build, seed ^ 0xabcdefULL);
}

}  // namespace gradcheck
