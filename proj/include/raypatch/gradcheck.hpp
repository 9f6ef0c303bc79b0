#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "raypatch/rng.hpp"
#include "raypatch/tensor.hpp"

namespace raypatch {

namespace detail {

inline void check_step(double step) {
  if (!(step >= 1e-7 && step <= 1e-4)) throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-4]");
}

inline double scalar_value(const Tensor& y) {
  if (y.numel() != 1) throw ShapeError("grad_check: function output " + shape_str(y.shape()) + " is not scalar");
  return y.item();
}

inline double relative_error(double ad, double fd) { return std::abs(ad - fd) / std::max(1.0, std::abs(fd)); }

}  // namespace detail

// Central finite differences against reverse-mode gradients of a scalar
// function of one tensor. Returns max |g_ad - g_fd| / max(1, |g_fd|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-6) {
  detail::check_step(step);
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  std::vector<double> analytic(leaf.numel(), 0.0);
  {
    Graph g;
    GraphScope scope(g);
    Tensor y = f(leaf);
    detail::scalar_value(y);
    if (y.requires_grad()) {
      g.backward(y);
      if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    }
  }
  NoGradScope no_grad;
  Tensor probe = x.clone();
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe.data()[i];
    probe.mutable_data()[i] = orig + step;
    const double fp = detail::scalar_value(f(probe));
    probe.mutable_data()[i] = orig - step;
    const double fm = detail::scalar_value(f(probe));
    probe.mutable_data()[i] = orig;
    worst = std::max(worst, detail::relative_error(analytic[i], (fp - fm) / (2.0 * step)));
  }
  return worst;
}

// Same check over the parameters a closure reads. Parameters are perturbed in
// place and restored. When `max_coords` is nonzero, at most that many
// coordinates per tensor are probed, chosen with `rng`.
inline double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double step = 1e-6,
                                std::size_t max_coords = 0, Rng* rng = nullptr) {
  detail::check_step(step);
  for (Tensor& p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  {
    Graph g;
    GraphScope scope(g);
    Tensor y = f();
    detail::scalar_value(y);
    g.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params) {
    analytic.emplace_back(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
    p.zero_grad();
  }
  NoGradScope no_grad;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    std::vector<std::size_t> coords;
    if (max_coords == 0 || max_coords >= p.numel() || rng == nullptr) {
      for (std::size_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t j = 0; j < max_coords; ++j) coords.push_back(rng->uniform_int(p.numel()));
    }
    for (std::size_t i : coords) {
      const double orig = p.data()[i];
      p.mutable_data()[i] = orig + step;
      const double fp = detail::scalar_value(f());
      p.mutable_data()[i] = orig - step;
      const double fm = detail::scalar_value(f());
      p.mutable_data()[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[t][i], (fp - fm) / (2.0 * step)));
    }
  }
  return worst;
}

}  // namespace raypatch
