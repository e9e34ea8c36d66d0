#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "waveglow/ops.hpp"
#include "waveglow/rng.hpp"
#include "waveglow/tensor.hpp"

namespace waveglow {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::string worst_param;
  std::int64_t coords_checked = 0;
};

// Central-difference check of reverse-mode gradients. `loss_fn` must rebuild
// the scalar loss from the current parameter values on every call; parameters
// are perturbed in place. When a parameter has more coordinates than
// `max_coords_per_param`, a random subset is probed.
template <typename T, typename F>
GradCheckReport check_gradients(F&& loss_fn,
                                std::vector<std::pair<std::string, Tensor<T>>> params,
                                double eps, std::int64_t max_coords_per_param,
                                Rng& rng) {
  for (auto& [name, p] : params) {
    (void)name;
    p.zero_grad();
  }
  Tensor<T> loss = loss_fn();
  backward(loss);

  GradCheckReport rep;
  for (auto& [name, p] : params) {
    const std::int64_t n = p.numel();
    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      std::vector<bool> taken(static_cast<size_t>(n), false);
      while (static_cast<std::int64_t>(coords.size()) < max_coords_per_param) {
        auto i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        if (!taken[static_cast<size_t>(i)]) {
          taken[static_cast<size_t>(i)] = true;
          coords.push_back(i);
        }
      }
    }
    auto vals = p.data();
    auto grads = p.grad();
    for (std::int64_t i : coords) {
      const T saved = vals[static_cast<size_t>(i)];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[static_cast<size_t>(i)] = saved + static_cast<T>(eps);
        fp = static_cast<double>(loss_fn().item());
        vals[static_cast<size_t>(i)] = saved - static_cast<T>(eps);
        fm = static_cast<double>(loss_fn().item());
        vals[static_cast<size_t>(i)] = saved;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = static_cast<double>(grads[static_cast<size_t>(i)]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace waveglow
