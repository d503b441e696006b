// Named, ordered parameter registry.
#pragma once

#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "edetr/tensor.hpp"

namespace edetr {

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed ^ 0xd1b54a32d192ed03ull) {}

  Tensor zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor::zeros(std::move(shape), true));
  }

  Tensor constant(const std::string& name, Shape shape, double v) {
    return insert(name, Tensor::full(std::move(shape), v, true));
  }

  /// Uniform(-b, b) with b = sqrt(1/fan_in), the usual linear-layer init.
  Tensor uniform(const std::string& name, Shape shape, int fan_in) {
    double b = std::sqrt(1.0 / std::max(1, fan_in));
    std::uniform_real_distribution<double> d(-b, b);
    std::vector<double> data(shape_numel(shape));
    for (auto& x : data) x = d(rng_);
    return insert(name, Tensor::from(std::move(shape), std::move(data), true));
  }

  Tensor explicit_init(const std::string& name, Shape shape,
                       std::vector<double> data) {
    return insert(name, Tensor::from(std::move(shape), std::move(data), true));
  }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("ParamStore: unknown parameter " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& all() const {
    return entries_;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  Tensor insert(const std::string& name, Tensor t) {
    if (index_.count(name))
      throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace edetr
