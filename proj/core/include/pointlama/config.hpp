#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointlama/encoder.hpp"
#include "pointlama/serialization.hpp"

namespace pointlama {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { pretrain, finetune_cls, finetune_seg, probe };
Task parse_task(const std::string& name);
std::string to_string(Task t);

struct DataConfig {
  std::string dir = "data";
  std::size_t points = 256;
  std::size_t groups = 32;
  std::size_t group_size = 16;
  std::size_t train_count = 200;
  std::size_t test_count = 100;
  double noise = 0.01;
};

struct SerializationConfig {
  Strategy strategy = Strategy::hilbert_pair;
  unsigned bits = 10;
};

struct MaskConfig {
  double ratio = 0.6;
  MaskMode mode = MaskMode::random;
};

struct DiffusionConfig {
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t decoder_blocks = 2;
};

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t warmup_steps = 10;
  double backbone_lr_scale = 0.1;
  double grad_clip = 0.0;  // 0 disables
  double min_lr_ratio = 0.01;
};

struct AblationConfig {
  std::vector<std::string> axes{"scanning", "pmla", "placement", "latent"};
  std::size_t pretrain_steps = 0;
};

struct RunConfig {
  Task task = Task::pretrain;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string init_checkpoint;  // finetune / probe: backbone to load, empty = random init
  std::size_t checkpoint_every = 0;
  std::size_t head_hidden = 64;
  std::size_t eval_batch_size = 25;
  DataConfig data;
  SerializationConfig serialization;
  MaskConfig mask;
  EncoderConfig encoder;
  DiffusionConfig diffusion;
  OptimConfig optim;
  AblationConfig ablation;

  /// Throws ConfigError describing the first invalid field.
  void validate() const;
};

/// Full-size backbone: 384 wide, 12 layers, PMLA at layer 6.
EncoderConfig full_encoder();
/// Desk-scale run used by the trainability and transfer checks.
RunConfig desk_config();

nlohmann::json to_json(const RunConfig& cfg);
/// Strict parse: every key must exist in the defaults and hold a compatible
/// type; missing keys keep their default. Throws ConfigError.
RunConfig config_from_json(const nlohmann::json& j, const RunConfig& defaults = desk_config());
RunConfig load_config(const std::filesystem::path& path, const RunConfig& defaults = desk_config());

/// Applies "a.b.c=value" overrides to a JSON config. Values parse as JSON when
/// possible, otherwise as strings.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace pointlama
