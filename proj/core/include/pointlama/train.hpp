#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointlama/checkpoint.hpp"
#include "pointlama/config.hpp"
#include "pointlama/dataset.hpp"
#include "pointlama/diffusion.hpp"
#include "pointlama/encoder.hpp"
#include "pointlama/metrics.hpp"

namespace pointlama {

/// Non-finite loss or gradient during training.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& msg, std::size_t step, std::uint64_t batch_seed)
      : std::runtime_error(msg), step(step), batch_seed(batch_seed) {}
  std::size_t step;
  std::uint64_t batch_seed;
};

/// Independent seed for (run seed, purpose tag, step).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t step);

/// FPS + KNN grouping per sample, computed once (FPS seed 0).
class PatchCache {
 public:
  PatchCache(const std::vector<Sample>& samples, std::size_t groups, std::size_t group_size);
  const PatchSet& get(std::size_t i);
  /// Stacks cached patch sets of several samples into one batch.
  PatchSet batch(const std::vector<std::size_t>& indices);
  std::size_t size() const { return samples_->size(); }

 private:
  const std::vector<Sample>* samples_;
  std::size_t groups_, group_size_;
  std::vector<std::unique_ptr<PatchSet>> cache_;
};

PatchSet stack_patches(const std::vector<const PatchSet*>& parts);

/// Sample indices for one step: epoch-wise seeded permutations walked in order.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch, std::size_t step,
                                       std::uint64_t seed);

struct PretrainModel {
  RunConfig cfg;
  ParamStore params;
  std::unique_ptr<HybridEncoder> encoder;
  std::unique_ptr<Denoiser> denoiser;
  DiffusionSchedule schedule;
};
std::unique_ptr<PretrainModel> build_pretrain_model(const RunConfig& cfg);

struct PretrainForward {
  Serialized serialized;
  MaskRecord mask;
  Value features;      // encoder output over the visible tokens
  Value loss;          // empty when nothing is masked
  DenseArray z0, eps;  // targets at masked slots
  std::vector<std::size_t> timesteps;
};

/// Masked patch tokens standardised per channel with statistics over every
/// token of the batch; a constant, gradient-free target. [B, Tm, D].
DenseArray diffusion_target(const DenseArray& tokens, const MaskRecord& mask);

/// group -> tokens -> serialize -> mask -> encode visible -> diffusion loss.
/// `zero_noise` forces eps = 0.
PretrainForward pretrain_forward(const PretrainModel& m, const PatchSet& patches, std::uint64_t batch_seed,
                                 bool zero_noise = false);

struct PretrainResult {
  std::vector<double> losses;
  std::vector<double> grad_norms;
  std::vector<CheckpointEntry> checkpoint;
};

/// Trains for cfg.optim.steps. With a non-empty out_dir writes metrics.jsonl,
/// timing.jsonl, summary.csv and checkpoints. Throws NumericError on NaN/inf,
/// after writing nan_dump.json.
PretrainResult run_pretrain(const RunConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir = {});

struct FinetuneModel {
  RunConfig cfg;
  std::size_t outputs = 0;
  ParamStore params;
  std::unique_ptr<HybridEncoder> encoder;
  std::unique_ptr<ClassificationHead> cls_head;
  std::unique_ptr<SegmentationHead> seg_head;
};
std::unique_ptr<FinetuneModel> build_finetune_model(const RunConfig& cfg, std::size_t outputs);

/// Serialized encoder features for a batch: features [B, T', D] and the
/// sequence they belong to.
struct EncodedBatch {
  Serialized serialized;
  Value features;
};
EncodedBatch encode_batch(const HybridEncoder& enc, const RunConfig& cfg, const PatchSet& patches,
                          std::uint64_t seed);

struct FinetuneResult {
  std::vector<double> losses;
  double test_accuracy = 0.0;      // classification accuracy, or point accuracy for segmentation
  SegmentationScore segmentation;  // finetune_seg only
  std::size_t loaded = 0;          // backbone entries taken from the checkpoint
};

/// Classification or part segmentation depending on cfg.task. `init` holds a
/// pretrained checkpoint (only "encoder." entries are used) or null.
FinetuneResult run_finetune(const RunConfig& cfg, const Dataset& ds, const std::vector<CheckpointEntry>* init,
                            const std::filesystem::path& out_dir = {});

struct AblationCell {
  std::string axis;
  std::string setting;
  std::string task;
  bool ok = false;
  double score = 0.0;  // accuracy or instance mIoU, in percent
  std::size_t params = 0;
  std::string error;
};

/// Configs of every cell for the requested axes.
std::vector<std::pair<AblationCell, RunConfig>> ablation_matrix(const RunConfig& base);
/// Runs every cell; failures are recorded and the run continues. Writes
/// ablation.csv and ablation.md when out_dir is set.
std::vector<AblationCell> run_ablation(const RunConfig& base, const Dataset& ds,
                                       const std::filesystem::path& out_dir = {});
std::string ablation_markdown(const std::vector<AblationCell>& cells);

/// Gate/state probe on the first test batch, one report per latent layer.
nlohmann::json run_probe(const RunConfig& cfg, const Dataset& ds, const std::vector<CheckpointEntry>* init,
                         const std::filesystem::path& out_dir = {});

}  // namespace pointlama
