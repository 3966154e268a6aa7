#include "pointlama/metrics.hpp"

#include <map>
#include <stdexcept>

namespace pointlama {

double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double part_iou(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& truth,
                std::uint32_t part) {
  if (pred.size() != truth.size()) throw std::invalid_argument("part_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == part, t = truth[i] == part;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

SegmentationScore segmentation_score(const std::vector<SegInstance>& instances,
                                     const std::vector<std::vector<std::uint32_t>>& class_parts) {
  SegmentationScore s;
  if (instances.empty()) return s;
  std::map<std::size_t, std::pair<double, std::size_t>> per_class;
  std::size_t hit = 0, total = 0;
  for (const auto& inst : instances) {
    if (inst.label >= class_parts.size() || class_parts[inst.label].empty())
      throw std::invalid_argument("segmentation_score: class without parts");
    double sum = 0.0;
    for (auto part : class_parts[inst.label]) sum += part_iou(inst.pred, inst.truth, part);
    const double miou = sum / static_cast<double>(class_parts[inst.label].size());
    s.instance_miou += miou;
    auto& c = per_class[inst.label];
    c.first += miou;
    ++c.second;
    for (std::size_t i = 0; i < inst.truth.size(); ++i) hit += inst.pred[i] == inst.truth[i];
    total += inst.truth.size();
  }
  s.instance_miou /= static_cast<double>(instances.size());
  for (const auto& [label, c] : per_class) s.class_miou += c.first / static_cast<double>(c.second);
  s.class_miou /= static_cast<double>(per_class.size());
  s.point_accuracy = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
  return s;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
}

void JsonlWriter::write(const nlohmann::json& record) {
  if (!out_.is_open()) return;
  out_ << record.dump() << '\n';
  out_.flush();
}

std::string format_number(double v) { return nlohmann::json(v).dump(); }

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(columns);
  for (const auto& r : rows) line(r);
}

}  // namespace pointlama
