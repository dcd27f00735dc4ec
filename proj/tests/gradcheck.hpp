#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "probdrop/trainer.hpp"

namespace probdrop::test {

struct GradCheckResult {
  std::size_t points_tried = 0;
  std::size_t points_used = 0;
  std::size_t parameters_checked = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

inline bool same_gates(const toy::ForwardCache& a, const toy::ForwardCache& b) {
  auto sign_match = [](const FeatureMap& x, const FeatureMap& y) {
    auto u = x.data();
    auto v = y.data();
    for (std::size_t k = 0; k < u.size(); ++k) {
      if ((u[k] > 0.0) != (v[k] > 0.0)) return false;
    }
    return true;
  };
  return sign_match(a.conv1_out, b.conv1_out) && sign_match(a.conv2_out, b.conv2_out);
}

/// Central differences against backward() with the drop site frozen, at
/// `points` random parameter points. A point where some +-h perturbation
/// flips a rectifier gate is skipped: the loss is not differentiable there.
inline GradCheckResult gradient_check(std::size_t points, double h, Variant variant, std::uint64_t seed) {
  using namespace probdrop::toy;
  GradCheckResult out;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> bias(0.0, 0.1);
  const auto data = make_dataset(seed, 2, 2);
  const std::vector<int> labels = data.train_labels;

  std::uint64_t draw = 0;
  while (out.points_used < points) {
    if (++out.points_tried > 50 * points) break;
    TinyNet net = TinyNet::init(seed * 1000 + ++draw);
    for (auto* b : {&net.conv1_b, &net.conv2_b, &net.fc_b}) {
      for (double& v : *b) v = bias(gen);
    }
    const DropSpec spec{variant, 0.2, 4, Mode::Train};
    const auto base = forward(net, data.train_images, spec, ScheduleState{0.2, 1, 1}, RngStream{seed, draw});
    const TinyNet grad = backward(net, base, labels);

    bool clean = true;
    double worst = 0.0;
    std::string where;
    auto params = net.tensors();
    auto grads = grad.tensors();
    for (std::size_t t = 0; t < params.size() && clean; ++t) {
      for (std::size_t k = 0; k < params[t].size() && clean; ++k) {
        const double keep = params[t][k];
        params[t][k] = keep + h;
        const auto plus = forward_fixed(net, data.train_images, base.site);
        params[t][k] = keep - h;
        const auto minus = forward_fixed(net, data.train_images, base.site);
        params[t][k] = keep;
        if (!same_gates(base, plus) || !same_gates(base, minus)) {
          clean = false;
          break;
        }
        const double numeric = (loss(plus, labels) - loss(minus, labels)) / (2.0 * h);
        const double analytic = grads[t][k];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
        const double rel = std::abs(numeric - analytic) / denom;
        if (rel > worst) {
          worst = rel;
          where = "tensor " + std::to_string(t) + " index " + std::to_string(k);
        }
      }
    }
    if (!clean) continue;
    ++out.points_used;
    out.parameters_checked += net.parameter_count();
    if (worst > out.max_rel_error) {
      out.max_rel_error = worst;
      out.worst = where;
    }
  }
  return out;
}

}  // namespace probdrop::test
