#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pointlama {

double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth);

/// Part-segmentation scores in the ShapeNetPart convention: per instance, the
/// IoU of every part of its class (an empty union counts as 1) is averaged;
/// instance mIoU averages instances, class mIoU averages the per-class means.
struct SegmentationScore {
  double instance_miou = 0.0;
  double class_miou = 0.0;
  double point_accuracy = 0.0;
};

struct SegInstance {
  std::size_t label = 0;                 // object class
  std::vector<std::uint32_t> truth;      // global part ids
  std::vector<std::uint32_t> pred;
};

/// IoU of one part within one instance.
double part_iou(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& truth,
                std::uint32_t part);
/// `class_parts[c]` lists the global part ids of class c.
SegmentationScore segmentation_score(const std::vector<SegInstance>& instances,
                                     const std::vector<std::vector<std::uint32_t>>& class_parts);

/// Appends one compact JSON object per line. Numbers use the shortest
/// round-trip form, so equal records give equal bytes.
class JsonlWriter {
 public:
  JsonlWriter() = default;
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& record);
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
};

/// Header row then one row per record, columns in the order given.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<std::string>>& rows);

std::string format_number(double v);

}  // namespace pointlama
