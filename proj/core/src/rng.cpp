#include "pointlama/rng.hpp"

namespace pointlama {

DenseArray Rng::uniform_array(Shape shape, double lo, double hi) {
  DenseArray a(std::move(shape));
  for (double& v : a.data()) v = uniform(lo, hi);
  return a;
}

DenseArray Rng::normal_array(Shape shape, double stddev) {
  DenseArray a(std::move(shape));
  for (double& v : a.data()) v = normal(0.0, stddev);
  return a;
}

}  // namespace pointlama
