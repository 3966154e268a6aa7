#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointlama/autodiff.hpp"
#include "pointlama/rng.hpp"

namespace pointlama {

/// Named learnable arrays in registration order. Every module registers its
/// parameters here exactly once; handles returned by add() alias the stored
/// node, so load() updates them in place.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Value value;
  };

  Value add(const std::string& name, DenseArray init);
  /// Non-learnable state saved with the parameters (e.g. running statistics).
  Value add_buffer(const std::string& name, DenseArray init);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight.
  Value add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Value& get(const std::string& name) const;

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// Total number of learnable scalars; buffers are excluded.
  std::size_t scalar_count() const;
  /// Scalars in entries whose name starts with `prefix`.
  std::size_t scalar_count(const std::string& prefix) const;

  void zero_grad();
  double grad_norm() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace pointlama
