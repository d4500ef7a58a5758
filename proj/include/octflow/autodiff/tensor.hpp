#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "octflow/errors.hpp"

namespace octflow::ad {

// Rank-4 extent (batch, channel, height, width).
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool positive() const { return n > 0 && c > 0 && h > 0 && w > 0; }
  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(s), data(s.size(), fill) {
    if (!s.positive()) throw GraphError("tensor extents must be positive, got " + s.str());
  }

  std::size_t size() const { return data.size(); }
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x;
  }
  T& at(int n, int c, int y, int x) { return data[offset(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data[offset(n, c, y, x)]; }
  T* sample(int n) { return data.data() + static_cast<std::size_t>(n) * shape.c * shape.plane(); }
  const T* sample(int n) const { return data.data() + static_cast<std::size_t>(n) * shape.c * shape.plane(); }

  void resize(Shape s) {
    shape = s;
    data.assign(s.size(), T{});
  }
  void zero() { std::fill(data.begin(), data.end(), T{}); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Non-trainable entries carry state such as running normalization statistics.
  bool trainable = true;
};

// Named, ordered parameter store with stable element addresses.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Shape shape, bool trainable = true) {
    if (find(name)) throw GraphError("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    p->trainable = trainable;
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw GraphError("unknown parameter '" + name + "'");
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.zero();
  }

  std::size_t size() const { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *items_[i]; }

  std::size_t scalar_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : items_)
      if (p->trainable || !trainable_only) n += p->value.size();
    return n;
  }

  // Values of every entry whose name starts with prefix, by name.
  std::vector<std::pair<std::string, std::vector<T>>> snapshot(const std::string& prefix = {}) const {
    std::vector<std::pair<std::string, std::vector<T>>> out;
    for (const auto& p : items_)
      if (p->name.starts_with(prefix)) out.emplace_back(p->name, p->value.data);
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
};

// He-normal initialisation from a fan-in.
template <typename T, typename Rng>
void init_he_normal(Tensor<T>& t, int fan_in, Rng& rng, double gain = 1.0) {
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / std::max(1, fan_in)));
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

}  // namespace octflow::ad
