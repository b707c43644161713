#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ladabert/bundle.hpp"
#include "ladabert/model.hpp"

namespace ladabert {

struct AdamConfig {
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
};

/// Which entries an update may touch.
struct UpdateConstraints {
  const MaskSet* masks = nullptr;
  std::vector<Group> frozen_groups;

  bool frozen(Group g) const {
    return std::find(frozen_groups.begin(), frozen_groups.end(), g) != frozen_groups.end();
  }
};

/// Adam with bias correction. Moment buffers are keyed by entry name, so the
/// optimizer must be reset when the parameter set changes shape.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return t_; }

  void reset() {
    first_ = {};
    second_ = {};
    t_ = 0;
  }

  void step(ParamBundle& params, const ParamBundle& grads, const UpdateConstraints& c = {}) {
    if (first_.empty()) {
      first_ = zeros_like(params);
      second_ = zeros_like(params);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    if (cfg_.learning_rate == 0.0) return;
    for (auto& e : params.mutable_entries()) {
      if (c.frozen(e.group)) continue;
      const PruneMask* mask = nullptr;
      if (c.masks != nullptr) {
        if (auto it = c.masks->find(e.name); it != c.masks->end()) mask = &it->second;
      }
      auto w = e.value.data();
      auto g = grads.at(e.name).data();
      auto m = first_.at(e.name).data();
      auto v = second_.at(e.name).data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        if (mask != nullptr && !mask->at_flat(k)) continue;
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

 private:
  AdamConfig cfg_;
  ParamBundle first_;
  ParamBundle second_;
  std::size_t t_ = 0;
};

}  // namespace ladabert
