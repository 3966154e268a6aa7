#include "pointlama/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace pointlama {

Value ParamStore::add(const std::string& name, DenseArray init) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  Value v = Value::parameter(std::move(init));
  index_.emplace(name, entries_.size());
  entries_.push_back({name, v});
  return v;
}

Value ParamStore::add_buffer(const std::string& name, DenseArray init) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  Value v = Value::constant(std::move(init));
  index_.emplace(name, entries_.size());
  entries_.push_back({name, v});
  return v;
}

Value ParamStore::add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return add(name, rng.uniform_array(std::move(shape), -bound, bound));
}

const Value& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return entries_[it->second].value;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.value.requires_grad()) n += e.value.size();
  return n;
}

std::size_t ParamStore::scalar_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.value.requires_grad() && e.name.rfind(prefix, 0) == 0) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_) {
    if (!e.value.has_grad()) continue;
    for (double g : e.value.node()->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

}  // namespace pointlama
