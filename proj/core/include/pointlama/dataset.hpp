#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pointlama/pointcloud.hpp"

namespace pointlama {

enum class ShapeClass : std::uint8_t { sphere = 0, cube, torus, cylinder };
inline constexpr std::size_t kNumShapeClasses = 4;
inline constexpr std::size_t kPartsPerClass = 2;
std::string to_string(ShapeClass c);

struct SyntheticShapeSpec {
  std::size_t points = 256;
  double noise = 0.01;
  bool rotate = true;  // random rotation about the z axis
};

struct Sample {
  std::vector<Point3> points;
  std::size_t label = 0;
  std::vector<std::uint32_t> parts;  // global part id = kPartsPerClass * label + local part
};

struct Dataset {
  std::vector<std::string> class_names;
  std::size_t num_parts = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// One cloud of the given class. Parts: sphere upper/lower hemisphere, cube
/// top/bottom half, torus inner/outer ring, cylinder side/caps. Coordinates are
/// rounded to float precision so the binary files hold them exactly.
Sample make_shape(ShapeClass c, const SyntheticShapeSpec& spec, Rng& rng);

/// Labels cycle through the classes; each cloud has its own RNG stream.
Dataset generate_dataset(const SyntheticShapeSpec& spec, std::size_t train_count,
                         std::size_t test_count, std::uint64_t seed);

/// ASCII: one "x y z" triple per line; blank lines and '#' comments skipped.
std::vector<Point3> read_points_ascii(const std::filesystem::path& path);
void write_points_ascii(const std::filesystem::path& path, const std::vector<Point3>& pts);
/// Binary little-endian: u32 count, then count x 3 float32.
std::vector<Point3> read_points_binary(const std::filesystem::path& path);
void write_points_binary(const std::filesystem::path& path, const std::vector<Point3>& pts);
/// Dispatches on extension: .bin binary, anything else ASCII.
std::vector<Point3> read_points(const std::filesystem::path& path);

/// Binary little-endian: u32 count, then count u32 labels.
std::vector<std::uint32_t> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<std::uint32_t>& labels);

/// dir/manifest.json plus one .bin and .seg file per cloud.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stacks samples into a batch; all clouds must have the same size.
PointCloud make_batch(const std::vector<const Sample*>& samples);

}  // namespace pointlama
