#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "terra/random.hpp"
#include "terra/tensor.hpp"

namespace terra {

// Ordered registry of named parameter tensors. Registration order is the
// checkpoint/optimizer order; initialization is keyed by (seed, name) so a
// module's weights do not depend on what was built before it, and shared
// modules initialize identically across ablation variants.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  void zero_grads() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

inline SplitMix64 param_rng(std::uint64_t seed, const std::string& name) {
  return SplitMix64(SplitMix64::mix(seed, fnv1a(name.data(), name.size())));
}

// Glorot-style uniform init in [-lim, lim], lim = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot(Shape shape, int fan_in, int fan_out, std::uint64_t seed,
                     const std::string& name) {
  SplitMix64 rng = param_rng(seed, name);
  const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.uniform(-lim, lim);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace terra
