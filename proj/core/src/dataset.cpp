#include "pointlama/dataset.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace pointlama {

namespace fs = std::filesystem;

std::string to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::sphere: return "sphere";
    case ShapeClass::cube: return "cube";
    case ShapeClass::torus: return "torus";
    case ShapeClass::cylinder: return "cylinder";
  }
  return "unknown";
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

// Azimuthal rotation about the vertical axis; shapes stay upright.
Mat3 random_rotation(Rng& rng) {
  const double a = rng.uniform(0.0, 2 * std::numbers::pi);
  const double c = std::cos(a), s = std::sin(a);
  return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

std::pair<Point3, std::uint32_t> surface_point(ShapeClass c, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  switch (c) {
    case ShapeClass::sphere: {
      Point3 p;
      double n = 0.0;
      do {
        n = 0.0;
        for (double& v : p) {
          v = rng.normal();
          n += v * v;
        }
      } while (n < 1e-12);
      n = std::sqrt(n);
      for (double& v : p) v /= n;
      return {p, p[2] >= 0.0 ? 0u : 1u};
    }
    case ShapeClass::cube: {
      constexpr double s = 0.6;
      const std::size_t face = rng.index(6);
      Point3 p{rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s)};
      p[face / 2] = face % 2 ? s : -s;
      return {p, p[2] >= 0.0 ? 0u : 1u};
    }
    case ShapeClass::torus: {
      constexpr double R = 0.7, r = 0.3;
      double u, v;
      do {
        u = rng.uniform(0.0, 2 * pi);
        v = rng.uniform(0.0, 2 * pi);
      } while (rng.uniform() * (R + r) > R + r * std::cos(v));
      const double rho = R + r * std::cos(v);
      return {{rho * std::cos(u), rho * std::sin(u), r * std::sin(v)}, rho < R ? 0u : 1u};
    }
    case ShapeClass::cylinder: {
      constexpr double r = 0.6, h = 0.8;
      const double side = 2 * pi * r * 2 * h, caps = 2 * pi * r * r;
      const double u = rng.uniform(0.0, 2 * pi);
      if (rng.uniform() * (side + caps) < side)
        return {{r * std::cos(u), r * std::sin(u), rng.uniform(-h, h)}, 0u};
      const double rad = r * std::sqrt(rng.uniform());
      return {{rad * std::cos(u), rad * std::sin(u), rng.uniform() < 0.5 ? -h : h}, 1u};
    }
  }
  throw std::invalid_argument("unknown shape class");
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const fs::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(path.string() + ": truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void check_tail(std::istream& in, const fs::path& path) {
  if (in.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(path.string() + ": trailing bytes after declared count");
}

}  // namespace

Sample make_shape(ShapeClass c, const SyntheticShapeSpec& spec, Rng& rng) {
  if (spec.points == 0) throw std::invalid_argument("make_shape: need at least one point");
  Sample s;
  s.label = static_cast<std::size_t>(c);
  const Mat3 rot = spec.rotate ? random_rotation(rng) : Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  s.points.reserve(spec.points);
  s.parts.reserve(spec.points);
  for (std::size_t i = 0; i < spec.points; ++i) {
    auto [p, part] = surface_point(c, rng);
    Point3 q{};
    for (int a = 0; a < 3; ++a) {
      q[a] = rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2];
      if (spec.noise > 0) q[a] += rng.normal(0.0, spec.noise);
      q[a] = static_cast<double>(static_cast<float>(q[a]));
    }
    s.points.push_back(q);
    s.parts.push_back(static_cast<std::uint32_t>(kPartsPerClass * s.label + part));
  }
  return s;
}

Dataset generate_dataset(const SyntheticShapeSpec& spec, std::size_t train_count,
                         std::size_t test_count, std::uint64_t seed) {
  Dataset ds;
  for (std::size_t c = 0; c < kNumShapeClasses; ++c) ds.class_names.push_back(to_string(ShapeClass(c)));
  ds.num_parts = kNumShapeClasses * kPartsPerClass;
  auto fill = [&](std::vector<Sample>& out, std::size_t count, std::uint64_t split) {
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      Rng rng = Rng::stream(seed, split, i);
      out.push_back(make_shape(ShapeClass(i % kNumShapeClasses), spec, rng));
    }
  };
  fill(ds.train, train_count, 1);
  fill(ds.test, test_count, 2);
  return ds;
}

std::vector<Point3> read_points_ascii(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Point3> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Point3 p;
    std::string extra;
    if (!(ss >> p[0] >> p[1] >> p[2]) || (ss >> extra))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 'x y z'");
    pts.push_back(p);
  }
  return pts;
}

void write_points_ascii(const fs::path& path, const std::vector<Point3>& pts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (const auto& p : pts) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

std::vector<Point3> read_points_binary(const fs::path& path) {
  auto in = open_in(path);
  const std::uint32_t n = read_u32(in, path);
  std::vector<Point3> pts(n);
  for (auto& p : pts)
    for (double& v : p) v = static_cast<double>(std::bit_cast<float>(read_u32(in, path)));
  check_tail(in, path);
  return pts;
}

void write_points_binary(const fs::path& path, const std::vector<Point3>& pts) {
  auto out = open_out(path);
  write_u32(out, static_cast<std::uint32_t>(pts.size()));
  for (const auto& p : pts)
    for (double v : p) write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Point3> read_points(const fs::path& path) {
  return path.extension() == ".bin" ? read_points_binary(path) : read_points_ascii(path);
}

std::vector<std::uint32_t> read_labels(const fs::path& path) {
  auto in = open_in(path);
  std::vector<std::uint32_t> labels(read_u32(in, path));
  for (auto& l : labels) l = read_u32(in, path);
  check_tail(in, path);
  return labels;
}

void write_labels(const fs::path& path, const std::vector<std::uint32_t>& labels) {
  auto out = open_out(path);
  write_u32(out, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) write_u32(out, l);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  nlohmann::json manifest{{"classes", ds.class_names}, {"num_parts", ds.num_parts}, {"splits", nlohmann::json::object()}};
  auto dump = [&](const std::string& split, const std::vector<Sample>& samples) {
    auto list = nlohmann::json::array();
    char name[64];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::snprintf(name, sizeof name, "%s_%05zu", split.c_str(), i);
      write_points_binary(dir / (std::string(name) + ".bin"), samples[i].points);
      write_labels(dir / (std::string(name) + ".seg"), samples[i].parts);
      list.push_back({{"points", std::string(name) + ".bin"},
                      {"parts", std::string(name) + ".seg"},
                      {"label", samples[i].label}});
    }
    manifest["splits"][split] = list;
  };
  dump("train", ds.train);
  dump("test", ds.test);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.class_names = m.at("classes").get<std::vector<std::string>>();
    ds.num_parts = m.at("num_parts").get<std::size_t>();
    for (const char* split : {"train", "test"}) {
      auto& out = std::string(split) == "train" ? ds.train : ds.test;
      for (const auto& e : m.at("splits").at(split)) {
        Sample s;
        s.points = read_points(dir / e.at("points").get<std::string>());
        s.label = e.at("label").get<std::size_t>();
        if (e.contains("parts")) s.parts = read_labels(dir / e.at("parts").get<std::string>());
        if (!s.parts.empty() && s.parts.size() != s.points.size())
          throw std::runtime_error(e.at("parts").get<std::string>() + ": label count != point count");
        if (s.label >= ds.class_names.size()) throw std::runtime_error("class label out of range");
        out.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  return ds;
}

PointCloud make_batch(const std::vector<const Sample*>& samples) {
  std::vector<std::vector<Point3>> sets;
  sets.reserve(samples.size());
  for (const auto* s : samples) sets.push_back(s->points);
  return PointCloud::from_sets(sets);
}

}  // namespace pointlama
