#include "pointlama/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pointlama/optim.hpp"

namespace pointlama {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTagBatch = 0xBA7C;
constexpr std::uint64_t kTagStep = 0x57E9;
constexpr std::uint64_t kTagEval = 0xE7A1;
constexpr std::uint64_t kTagInit = 0x1417;

bool finite(double v) { return std::isfinite(v); }

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<const Sample*> gather_samples(const std::vector<Sample>& all, const std::vector<std::size_t>& idx) {
  std::vector<const Sample*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&all.at(i));
  return out;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

[[noreturn]] void numeric_abort(const fs::path& out_dir, const std::string& what, std::size_t step,
                                std::uint64_t batch_seed, const std::vector<std::size_t>& indices) {
  if (!out_dir.empty())
    write_json_file(out_dir / "nan_dump.json",
                    json{{"error", what}, {"step", step}, {"batch_seed", batch_seed}, {"sample_indices", indices}});
  throw NumericError(what + " at step " + std::to_string(step) + " (batch seed " + std::to_string(batch_seed) + ")",
                     step, batch_seed);
}

std::size_t argmax_row(std::span<const double> row, const std::vector<std::uint32_t>* allowed) {
  std::size_t best = 0;
  double bv = -std::numeric_limits<double>::infinity();
  if (allowed) {
    for (auto p : *allowed)
      if (row[p] > bv) {
        bv = row[p];
        best = p;
      }
    return best;
  }
  for (std::size_t i = 0; i < row.size(); ++i)
    if (row[i] > bv) {
      bv = row[i];
      best = i;
    }
  return best;
}

}  // namespace

DenseArray diffusion_target(const DenseArray& tokens, const MaskRecord& mask) {
  const std::size_t B = tokens.dim(0), T = tokens.dim(1), D = tokens.dim(2), Tm = mask.masked_count();
  const double n = static_cast<double>(B * T);
  std::vector<double> mu(D, 0.0), inv(D, 0.0);
  for (std::size_t i = 0; i < B * T; ++i)
    for (std::size_t d = 0; d < D; ++d) mu[d] += tokens[i * D + d] / n;
  for (std::size_t i = 0; i < B * T; ++i)
    for (std::size_t d = 0; d < D; ++d) inv[d] += (tokens[i * D + d] - mu[d]) * (tokens[i * D + d] - mu[d]) / n;
  for (auto& v : inv) v = 1.0 / std::sqrt(v + kLayerNormEps);
  DenseArray z0({B, Tm, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < Tm; ++i) {
      const std::size_t src = b * T + mask.masked_rows[b * Tm + i];
      for (std::size_t d = 0; d < D; ++d) z0[(b * Tm + i) * D + d] = (tokens[src * D + d] - mu[d]) * inv[d];
    }
  return z0;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t step) {
  return mix64(mix64(seed ^ mix64(tag)) + step);
}

PatchCache::PatchCache(const std::vector<Sample>& samples, std::size_t groups, std::size_t group_size)
    : samples_(&samples), groups_(groups), group_size_(group_size), cache_(samples.size()) {}

const PatchSet& PatchCache::get(std::size_t i) {
  auto& slot = cache_.at(i);
  if (!slot) {
    const PointCloud cloud = make_batch({&(*samples_)[i]});
    slot = std::make_unique<PatchSet>(knn_group(cloud, farthest_point_sample(cloud, groups_, 0), group_size_));
  }
  return *slot;
}

PatchSet PatchCache::batch(const std::vector<std::size_t>& indices) {
  std::vector<const PatchSet*> parts;
  parts.reserve(indices.size());
  for (auto i : indices) parts.push_back(&get(i));
  return stack_patches(parts);
}

PatchSet stack_patches(const std::vector<const PatchSet*>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_patches: empty batch");
  const std::size_t G = parts[0]->groups(), S = parts[0]->group_size();
  std::size_t B = 0;
  for (const auto* p : parts) {
    if (p->groups() != G || p->group_size() != S) throw ShapeError("stack_patches: inconsistent patch shapes");
    B += p->batch();
  }
  PatchSet out;
  out.centers = DenseArray({B, G, 3});
  out.neighborhoods = DenseArray({B, G, S, 3});
  std::size_t c = 0, n = 0;
  for (const auto* p : parts) {
    std::copy(p->centers.data().begin(), p->centers.data().end(), out.centers.data().begin() + static_cast<std::ptrdiff_t>(c));
    std::copy(p->neighborhoods.data().begin(), p->neighborhoods.data().end(),
              out.neighborhoods.data().begin() + static_cast<std::ptrdiff_t>(n));
    c += p->centers.size();
    n += p->neighborhoods.size();
    out.center_indices.insert(out.center_indices.end(), p->center_indices.begin(), p->center_indices.end());
    out.neighbor_indices.insert(out.neighbor_indices.end(), p->neighbor_indices.begin(), p->neighbor_indices.end());
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch, std::size_t step,
                                       std::uint64_t seed) {
  if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  out.reserve(batch);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t g = step * batch + i, epoch = g / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), Rng::stream(seed, kTagBatch, epoch).engine());
      cached_epoch = epoch;
    }
    out.push_back(perm[g % dataset_size]);
  }
  return out;
}

std::unique_ptr<PretrainModel> build_pretrain_model(const RunConfig& cfg) {
  cfg.validate();
  auto m = std::make_unique<PretrainModel>();
  m->cfg = cfg;
  Rng rng(derive_seed(cfg.seed, kTagInit, 0));
  m->encoder = std::make_unique<HybridEncoder>(cfg.encoder, m->params, rng);
  DenoiserConfig dc;
  dc.d_model = cfg.encoder.d_model;
  dc.blocks = cfg.diffusion.decoder_blocks;
  dc.pos_hidden = cfg.encoder.pos_hidden;
  dc.mamba = cfg.encoder.mamba();
  m->denoiser = std::make_unique<Denoiser>(m->params, "decoder", dc, rng);
  m->schedule = build_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end);
  return m;
}

PretrainForward pretrain_forward(const PretrainModel& m, const PatchSet& patches, std::uint64_t batch_seed,
                                 bool zero_noise) {
  const auto& cfg = m.cfg;
  PretrainForward f;
  TokenSequence tokens = m.encoder->embed(patches);
  tokens.tokens = detach(tokens.tokens);
  f.serialized = serialize(patches, tokens, cfg.serialization.strategy, cfg.serialization.bits,
                           derive_seed(batch_seed, 1, 0));
  const TokenSequence& seq = f.serialized.seq;
  if (cfg.mask.ratio == 0.0) {
    f.mask = make_mask(seq.batch(), seq.length(), 0.0, cfg.mask.mode, 0);
    f.features = m.encoder->encode(seq);
    return f;
  }
  MaskedSequence ms = apply_mask(seq, cfg.mask.ratio, cfg.mask.mode, derive_seed(batch_seed, 2, 0));
  f.mask = std::move(ms.mask);
  f.features = m.encoder->encode(ms.visible);
  const std::size_t B = seq.batch(), Tm = f.mask.masked_count(), D = seq.width();
  if (Tm == 0) return f;

  f.z0 = diffusion_target(seq.tokens.value(), f.mask);
  Rng rng(derive_seed(batch_seed, 3, 0));
  f.timesteps.resize(B);
  for (auto& t : f.timesteps) t = 1 + rng.index(m.schedule.T);
  f.eps = zero_noise ? DenseArray({B, Tm, D}, 0.0) : rng.normal_array({B, Tm, D});
  const DenseArray zt = q_sample(f.z0, f.timesteps, f.eps, m.schedule);
  const Value eps_hat = m.denoiser->predict(Value::constant(zt), f.timesteps, f.features, f.mask, seq.centers);
  f.loss = diffusion_loss(eps_hat, f.eps);
  return f;
}

PretrainResult run_pretrain(const RunConfig& cfg, const Dataset& ds, const fs::path& out_dir) {
  auto model = build_pretrain_model(cfg);
  PatchCache cache(ds.train, cfg.data.groups, cfg.data.group_size);
  AdamW opt({0.9, 0.999, 1e-8, cfg.optim.weight_decay});
  opt.add_store(model->params);

  JsonlWriter metrics, timing;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics = JsonlWriter(out_dir / "metrics.jsonl");
    timing = JsonlWriter(out_dir / "timing.jsonl");
    write_json_file(out_dir / "config.json", to_json(cfg));
  }

  PretrainResult res;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = batch_indices(ds.train.size(), cfg.optim.batch_size, step, cfg.seed);
    const std::uint64_t bseed = derive_seed(cfg.seed, kTagStep, step);
    const PatchSet patches = cache.batch(idx);
    PretrainForward f = pretrain_forward(*model, patches, bseed);
    if (!f.loss) throw std::invalid_argument("pretrain: mask ratio must be > 0 to train");
    const double loss = f.loss.item();
    if (!finite(loss)) numeric_abort(out_dir, "non-finite loss", step + 1, bseed, idx);
    opt.zero_grad();
    backward(f.loss);
    double gnorm = opt.grad_norm();
    if (!finite(gnorm)) numeric_abort(out_dir, "non-finite gradient", step + 1, bseed, idx);
    if (cfg.optim.grad_clip > 0) opt.clip_grad_norm(cfg.optim.grad_clip);
    const double lr = warmup_cosine_lr(step, cfg.optim.steps, cfg.optim.warmup_steps, cfg.optim.lr, cfg.optim.min_lr_ratio);
    opt.step(lr);
    res.losses.push_back(loss);
    res.grad_norms.push_back(gnorm);
    metrics.write({{"step", step + 1}, {"loss", loss}, {"grad_norm", gnorm}, {"lr", lr}});
    timing.write({{"step", step + 1}, {"step_ms", elapsed_ms(t0)}, {"total_ms", elapsed_ms(start)}});
    if (!out_dir.empty() && cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "ckpt_step%06zu.plma", step + 1);
      save_checkpoint(out_dir / name, model->params);
    }
  }
  res.checkpoint = snapshot(model->params);
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "final.plma", res.checkpoint);
    std::vector<std::string> row{"pretrain", std::to_string(res.losses.size())};
    if (res.losses.empty()) {
      row.insert(row.end(), {"", "", ""});
    } else {
      row.push_back(format_number(res.losses.front()));
      row.push_back(format_number(res.losses.back()));
      row.push_back(format_number(*std::min_element(res.losses.begin(), res.losses.end())));
    }
    write_csv(out_dir / "summary.csv", {"task", "steps", "first_loss", "final_loss", "min_loss"}, {row});
  }
  return res;
}

std::unique_ptr<FinetuneModel> build_finetune_model(const RunConfig& cfg, std::size_t outputs) {
  cfg.validate();
  auto m = std::make_unique<FinetuneModel>();
  m->cfg = cfg;
  m->outputs = outputs;
  // Same stream as pretraining, so an unloaded backbone matches a fresh pretrain init.
  Rng rng(derive_seed(cfg.seed, kTagInit, 0));
  m->encoder = std::make_unique<HybridEncoder>(cfg.encoder, m->params, rng);
  Rng head_rng(derive_seed(cfg.seed, kTagInit, 1));
  if (cfg.task == Task::finetune_seg)
    m->seg_head = std::make_unique<SegmentationHead>(m->params, "seg_head", cfg.encoder.d_model, cfg.head_hidden,
                                                     outputs, head_rng);
  else
    m->cls_head = std::make_unique<ClassificationHead>(m->params, "cls_head", cfg.encoder.d_model, cfg.head_hidden,
                                                       outputs, head_rng);
  return m;
}

EncodedBatch encode_batch(const HybridEncoder& enc, const RunConfig& cfg, const PatchSet& patches,
                          std::uint64_t seed) {
  EncodedBatch e;
  e.serialized = serialize(patches, enc.embed(patches), cfg.serialization.strategy, cfg.serialization.bits, seed);
  e.features = enc.encode(e.serialized.seq);
  return e;
}

FinetuneResult run_finetune(const RunConfig& cfg, const Dataset& ds, const std::vector<CheckpointEntry>* init,
                            const fs::path& out_dir) {
  const bool seg = cfg.task == Task::finetune_seg;
  if (!seg && cfg.task != Task::finetune_cls) throw ConfigError("run_finetune: task must be finetune_cls or finetune_seg");
  if (ds.train.empty() || ds.test.empty()) throw std::invalid_argument("run_finetune: dataset needs train and test splits");
  const std::size_t outputs = seg ? ds.num_parts : ds.class_names.size();
  if (seg)
    for (const auto* split : {&ds.train, &ds.test})
      for (const auto& s : *split)
        if (s.parts.size() != s.points.size()) throw std::invalid_argument("run_finetune: segmentation needs part labels");
  auto model = build_finetune_model(cfg, outputs);
  FinetuneResult res;
  if (init) res.loaded = load_into(model->params, *init, "encoder.");

  std::vector<std::vector<std::uint32_t>> class_parts(ds.class_names.size());
  for (std::size_t c = 0; c < class_parts.size(); ++c)
    for (std::size_t p = 0; p < kPartsPerClass; ++p)
      class_parts[c].push_back(static_cast<std::uint32_t>(c * kPartsPerClass + p));

  PatchCache train_cache(ds.train, cfg.data.groups, cfg.data.group_size);
  PatchCache test_cache(ds.test, cfg.data.groups, cfg.data.group_size);
  AdamW opt({0.9, 0.999, 1e-8, cfg.optim.weight_decay});
  opt.add_store(model->params, "encoder.", cfg.optim.backbone_lr_scale);

  JsonlWriter metrics, timing;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics = JsonlWriter(out_dir / "metrics.jsonl");
    timing = JsonlWriter(out_dir / "timing.jsonl");
    write_json_file(out_dir / "config.json", to_json(cfg));
  }

  auto forward = [&](const std::vector<const Sample*>& samples, const PatchSet& patches, std::uint64_t seed,
                     bool training) {
    EncodedBatch e = encode_batch(*model->encoder, cfg, patches, seed);
    if (seg)
      return model->seg_head->forward(e.features, e.serialized.seq.centers, make_batch(samples).points, training);
    return model->cls_head->forward(e.features, training);
  };

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = batch_indices(ds.train.size(), cfg.optim.batch_size, step, cfg.seed);
    const std::uint64_t bseed = derive_seed(cfg.seed, kTagStep, step);
    const auto samples = gather_samples(ds.train, idx);
    Value logits = forward(samples, train_cache.batch(idx), bseed, true);
    std::vector<std::size_t> labels;
    if (seg) {
      for (const auto* s : samples) labels.insert(labels.end(), s->parts.begin(), s->parts.end());
      logits = reshape(logits, {labels.size(), outputs});
    } else {
      for (const auto* s : samples) labels.push_back(s->label);
    }
    Value loss = cross_entropy(logits, labels);
    const double lv = loss.item();
    if (!finite(lv)) numeric_abort(out_dir, "non-finite loss", step + 1, bseed, idx);
    opt.zero_grad();
    backward(loss);
    const double gnorm = opt.grad_norm();
    if (!finite(gnorm)) numeric_abort(out_dir, "non-finite gradient", step + 1, bseed, idx);
    if (cfg.optim.grad_clip > 0) opt.clip_grad_norm(cfg.optim.grad_clip);
    const double lr = warmup_cosine_lr(step, cfg.optim.steps, cfg.optim.warmup_steps, cfg.optim.lr, cfg.optim.min_lr_ratio);
    opt.step(lr);
    res.losses.push_back(lv);
    metrics.write({{"step", step + 1}, {"loss", lv}, {"grad_norm", gnorm}, {"lr", lr}});
    timing.write({{"step", step + 1}, {"step_ms", elapsed_ms(t0)}, {"total_ms", elapsed_ms(start)}});
  }

  // Evaluation on the held-out split, fixed batches in file order.
  std::vector<std::size_t> pred, truth;
  std::vector<SegInstance> instances;
  for (std::size_t begin = 0, b = 0; begin < ds.test.size(); begin += cfg.eval_batch_size, ++b) {
    std::vector<std::size_t> idx(std::min(cfg.eval_batch_size, ds.test.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const auto samples = gather_samples(ds.test, idx);
    const DenseArray logits = forward(samples, test_cache.batch(idx), derive_seed(cfg.seed, kTagEval, b), false).value();
    const std::size_t K = logits.dim(logits.rank() - 1);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (!seg) {
        pred.push_back(argmax_row(logits.data().subspan(i * K, K), nullptr));
        truth.push_back(samples[i]->label);
        continue;
      }
      SegInstance inst;
      inst.label = samples[i]->label;
      inst.truth = samples[i]->parts;
      const std::size_t N = samples[i]->points.size();
      for (std::size_t p = 0; p < N; ++p)
        inst.pred.push_back(static_cast<std::uint32_t>(
            argmax_row(logits.data().subspan((i * N + p) * K, K), &class_parts[inst.label])));
      instances.push_back(std::move(inst));
    }
  }
  if (seg) {
    res.segmentation = segmentation_score(instances, class_parts);
    res.test_accuracy = res.segmentation.point_accuracy;
  } else {
    res.test_accuracy = accuracy(pred, truth);
  }

  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "final.plma", model->params);
    write_csv(out_dir / "summary.csv",
              {"task", "steps", "final_loss", "test_accuracy", "instance_miou", "class_miou"},
              {{to_string(cfg.task), std::to_string(res.losses.size()),
                res.losses.empty() ? "" : format_number(res.losses.back()), format_number(res.test_accuracy),
                seg ? format_number(res.segmentation.instance_miou) : "",
                seg ? format_number(res.segmentation.class_miou) : ""}});
  }
  return res;
}

std::vector<std::pair<AblationCell, RunConfig>> ablation_matrix(const RunConfig& base) {
  std::vector<std::pair<AblationCell, RunConfig>> cells;
  auto add = [&](const std::string& axis, const std::string& setting, Task task, RunConfig cfg) {
    cfg.task = task;
    AblationCell cell;
    cell.axis = axis;
    cell.setting = setting;
    cell.task = to_string(task);
    cells.emplace_back(cell, std::move(cfg));
  };
  const std::size_t depth = base.encoder.depth;
  for (const auto& axis : base.ablation.axes) {
    if (axis == "scanning") {
      const std::pair<const char*, Strategy> curves[] = {
          {"random", Strategy::random}, {"hilbert+trans", Strategy::hilbert_pair}, {"axis-wise", Strategy::axis}};
      for (Task task : {Task::finetune_cls, Task::finetune_seg})
        for (const auto& [name, strategy] : curves) {
          RunConfig c = base;
          c.serialization.strategy = strategy;
          add(axis, name, task, c);
        }
    } else if (axis == "pmla") {
      RunConfig without = base, with = base;
      without.encoder.pmla_positions.clear();
      with.encoder.pmla_positions = {pmla_placement_index("middle", depth)};
      add(axis, "without", Task::finetune_cls, without);
      add(axis, "with", Task::finetune_cls, with);
    } else if (axis == "placement") {
      for (const char* where : {"early", "middle", "late"}) {
        RunConfig c = base;
        c.encoder.pmla_positions = {pmla_placement_index(where, depth)};
        add(axis, std::string(where) + " (layer " + std::to_string(*c.encoder.pmla_positions.begin()) + ")",
            Task::finetune_cls, c);
      }
    } else if (axis == "latent") {
      for (std::size_t r : {32, 48, 64, 128}) {
        RunConfig c = base;
        c.encoder.latent = r;
        add(axis, std::to_string(r), Task::finetune_cls, c);
      }
    } else {
      throw ConfigError("unknown ablation axis '" + axis + "'");
    }
  }
  return cells;
}

std::vector<AblationCell> run_ablation(const RunConfig& base, const Dataset& ds, const fs::path& out_dir) {
  std::vector<AblationCell> out;
  for (auto& [cell, cfg] : ablation_matrix(base)) {
    try {
      cfg.validate();
      std::vector<CheckpointEntry> ckpt;
      if (base.ablation.pretrain_steps > 0) {
        RunConfig pre = cfg;
        pre.task = Task::pretrain;
        pre.optim.steps = base.ablation.pretrain_steps;
        ckpt = run_pretrain(pre, ds).checkpoint;
      }
      const FinetuneResult r = run_finetune(cfg, ds, ckpt.empty() ? nullptr : &ckpt);
      cell.score = 100.0 * (cfg.task == Task::finetune_seg ? r.segmentation.instance_miou : r.test_accuracy);
      cell.params = build_finetune_model(cfg, cfg.task == Task::finetune_seg ? ds.num_parts : ds.class_names.size())
                        ->params.scalar_count();
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    out.push_back(cell);
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::vector<std::vector<std::string>> rows;
    for (const auto& c : out)
      rows.push_back({c.axis, "\"" + c.setting + "\"", c.task, c.ok ? "ok" : "failed",
                      c.ok ? format_number(c.score) : "", std::to_string(c.params), "\"" + c.error + "\""});
    write_csv(out_dir / "ablation.csv", {"axis", "setting", "task", "status", "score", "params", "error"}, rows);
    std::ofstream md(out_dir / "ablation.md", std::ios::trunc);
    md << ablation_markdown(out);
  }
  return out;
}

std::string ablation_markdown(const std::vector<AblationCell>& cells) {
  std::ostringstream md;
  std::string axis;
  char buf[32];
  for (const auto& c : cells) {
    if (c.axis != axis) {
      axis = c.axis;
      md << (md.tellp() > 0 ? "\n" : "") << "### " << axis << "\n\n| setting | task | score | params |\n|---|---|---|---|\n";
    }
    if (c.ok) std::snprintf(buf, sizeof buf, "%.2f", c.score);
    md << "| " << c.setting << " | " << c.task << " | " << (c.ok ? buf : "failed: " + c.error) << " | " << c.params
       << " |\n";
  }
  return md.str();
}

json run_probe(const RunConfig& cfg, const Dataset& ds, const std::vector<CheckpointEntry>* init,
               const fs::path& out_dir) {
  ParamStore params;
  Rng rng(derive_seed(cfg.seed, kTagInit, 0));
  HybridEncoder enc(cfg.encoder, params, rng);
  if (init) load_into(params, *init, "encoder.");
  const auto& split = ds.test.empty() ? ds.train : ds.test;
  if (split.empty()) throw std::invalid_argument("run_probe: empty dataset");
  std::vector<std::size_t> idx(std::min(cfg.eval_batch_size, split.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  PatchCache cache(split, cfg.data.groups, cfg.data.group_size);
  const PatchSet patches = cache.batch(idx);
  const Serialized s = serialize(patches, enc.embed(patches), cfg.serialization.strategy, cfg.serialization.bits,
                                 derive_seed(cfg.seed, kTagEval, 0));
  const auto tr = enc.trace(s.seq);
  json layers = json::array();
  for (std::size_t i = 0; i < enc.depth(); ++i) {
    const auto* blk = enc.latent_layer(i);
    if (!blk) continue;
    const Value& x = tr.inputs[i];
    const auto* prev = i > 0 ? enc.mamba_layer(i - 1) : nullptr;
    const DenseArray readout = prev ? prev->branch(tr.inputs[i - 1]).value() : x.value();
    const auto report = gate_state_probe(blk->pmla(), blk->pmla_input(x), readout);
    json r = json::parse(to_json(report));
    r["layer"] = i;
    r["readout"] = prev ? "mamba_branch" : "block_input";
    layers.push_back(r);
  }
  json out{{"pretrained", init != nullptr}, {"samples", idx.size()}, {"layers", layers}};
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_json_file(out_dir / "probe.json", out);
  }
  return out;
}

}  // namespace pointlama
