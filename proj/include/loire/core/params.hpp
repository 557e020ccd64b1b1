#ifndef LOIRE_CORE_PARAMS_HPP_
#define LOIRE_CORE_PARAMS_HPP_

#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "loire/core/autograd.hpp"
#include "loire/core/ops.hpp"

namespace loire {

template <typename T>
using Var = ag::Var<T>;

/**
 * Named, ordered collection of trainable tensors. Insertion order is the
 * manifest order used by checkpoints and digests.
 */
template <typename T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Shape shape, std::vector<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = names_.size();
    names_.push_back(name);
    vars_.push_back(Var<T>::parameter(std::move(shape), std::move(value)));
    return vars_.back();
  }

  template <typename Rng>
  Var<T>& add_normal(const std::string& name, Shape shape, Rng& rng, double stddev = 0.02) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return add(name, std::move(shape), std::move(v));
  }

  Var<T>& add_constant(const std::string& name, Shape shape, T fill) {
    std::vector<T> v(shape_size(shape), fill);
    return add(name, std::move(shape), std::move(v));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return vars_[it->second];
  }
  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return vars_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  const Var<T>& at(std::size_t i) const { return vars_[i]; }
  Var<T>& at(std::size_t i) { return vars_[i]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  void set_trainable(bool trainable) {
    for (auto& v : vars_) v.set_requires_grad(trainable);
  }

  /// Copies values (not graph state) from another store with identical names and shapes.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto& src = other.get(names_[i]);
      if (src.shape() != vars_[i].shape())
        throw ShapeError("parameter '" + names_[i] + "' shape " + shape_str(src.shape()) +
                         " != " + shape_str(vars_[i].shape()));
      auto& dst = vars_[i].mutable_value();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }

  /// Appends every parameter of `other` under `prefix`, sharing the same tensors.
  void merge(const ParamStore& other, const std::string& prefix = "") {
    for (std::size_t i = 0; i < other.size(); ++i) {
      const std::string name = prefix + other.names()[i];
      if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
      index_[name] = names_.size();
      names_.push_back(name);
      vars_.push_back(other.at(i));
    }
  }

  /// Parameters whose names start with `prefix` (shared tensors, prefix kept).
  ParamStore subset(const std::string& prefix) const {
    ParamStore out;
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) {
        out.index_[names_[i]] = out.names_.size();
        out.names_.push_back(names_[i]);
        out.vars_.push_back(vars_[i]);
      }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::deque<Var<T>> vars_;  // deque: references returned by add() survive later adds
  std::map<std::string, std::size_t> index_;
};

namespace nn {

/// Dense layer x[m, in] -> [m, out] with weight [in, out] and bias [out].
template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  template <typename Rng>
  static Linear create(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng,
                       double stddev = 0.02) {
    Linear l;
    l.weight = store.add_normal(name + ".w", {in, out}, rng, stddev);
    l.bias = store.add_constant(name + ".b", {out}, T(0));
    return l;
  }

  static Linear bind(const ParamStore<T>& store, const std::string& name) {
    return Linear{store.get(name + ".w"), store.get(name + ".b")};
  }

  Var<T> operator()(const Var<T>& x) const { return ag::add_bias(ag::matmul(x, weight), bias); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, int width) {
    return LayerNorm{store.add_constant(name + ".gamma", {width}, T(1)),
                     store.add_constant(name + ".beta", {width}, T(0))};
  }

  Var<T> operator()(const Var<T>& x) const { return ag::layer_norm(x, gamma, beta); }
};

/// Square-kernel convolution with weight [out, in, k, k] and bias [out].
template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  template <typename Rng>
  static Conv2d create(ParamStore<T>& store, const std::string& name, int in, int out, int k,
                       int stride, int pad, Rng& rng, double stddev = 0.02) {
    Conv2d c;
    c.weight = store.add_normal(name + ".w", {out, in, k, k}, rng, stddev);
    c.bias = store.add_constant(name + ".b", {out}, T(0));
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

}  // namespace nn
}  // namespace loire

#endif  // LOIRE_CORE_PARAMS_HPP_
