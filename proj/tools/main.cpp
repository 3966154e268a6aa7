#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pointlama/checkpoint.hpp"
#include "pointlama/config.hpp"
#include "pointlama/dataset.hpp"
#include "pointlama/train.hpp"

namespace fs = std::filesystem;
using namespace pointlama;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3 };

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON run configuration");
  cmd->add_option("--seed", a.seed, "Run seed");
  cmd->add_option("--out-dir", a.out_dir, "Output directory");
  cmd->add_option("--set", a.sets, "Override a config key, e.g. --set optim.lr=5e-4")->take_all();
}

RunConfig resolve(const CommonArgs& a, std::optional<Task> task = std::nullopt) {
  json j = json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("cannot open config " + a.config);
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + a.config + ": " + e.what());
    }
  }
  if (task) j["task"] = to_string(*task);
  if (a.seed) j["seed"] = *a.seed;
  if (!a.out_dir.empty()) j["out_dir"] = a.out_dir;
  for (const auto& s : a.sets) apply_override(j, s);
  return config_from_json(j);
}

Dataset open_dataset(const RunConfig& cfg) {
  if (!fs::exists(fs::path(cfg.data.dir) / "manifest.json"))
    throw ConfigError("no dataset at '" + cfg.data.dir + "' (run `pointlama generate` first)");
  return load_dataset(cfg.data.dir);
}

std::optional<std::vector<CheckpointEntry>> maybe_checkpoint(const std::string& cli, const RunConfig& cfg) {
  const std::string path = cli.empty() ? cfg.init_checkpoint : cli;
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

int inspect(const std::string& path, bool as_json) {
  const auto entries = load_checkpoint(path);
  std::size_t total = 0;
  json list = json::array();
  for (const auto& e : entries) {
    total += e.value.size();
    list.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"count", e.value.size()}});
  }
  if (as_json) {
    std::cout << json{{"entries", list}, {"tensors", entries.size()}, {"parameters", total}}.dump(2) << '\n';
    return kOk;
  }
  for (const auto& e : entries) std::cout << e.name << "  " << to_string(e.value.shape()) << '\n';
  std::cout << entries.size() << " tensors, " << total << " parameters\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PointLAMA desk-scale pretraining and evaluation"};
  app.require_subcommand(1);

  CommonArgs gen_a, pre_a, fin_a, abl_a, prb_a;
  auto* gen = app.add_subcommand("generate", "Write a synthetic shape dataset");
  add_common(gen, gen_a);

  auto* pre = app.add_subcommand("pretrain", "Diffusion pretraining of the encoder");
  add_common(pre, pre_a);

  auto* fin = app.add_subcommand("finetune", "Classification or part-segmentation finetuning");
  add_common(fin, fin_a);
  std::string fin_task = "cls", fin_ckpt;
  fin->add_option("--task", fin_task, "cls or seg")->check(CLI::IsMember({"cls", "seg"}));
  fin->add_option("--checkpoint", fin_ckpt, "Pretrained checkpoint (default: init_checkpoint)");

  auto* abl = app.add_subcommand("ablate", "Run the ablation matrix");
  add_common(abl, abl_a);

  auto* prb = app.add_subcommand("probe", "Gate/state correlation probe");
  add_common(prb, prb_a);
  std::string prb_ckpt;
  prb->add_option("--checkpoint", prb_ckpt, "Encoder checkpoint (default: init_checkpoint)");

  auto* ins = app.add_subcommand("inspect-checkpoint", "List checkpoint tensors");
  std::string ins_path;
  bool ins_json = false;
  ins->add_option("path", ins_path, "Checkpoint file")->required();
  ins->add_flag("--json", ins_json, "Emit JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      const RunConfig cfg = resolve(gen_a);
      const fs::path dir = gen_a.out_dir.empty() ? fs::path(cfg.data.dir) : fs::path(gen_a.out_dir);
      const Dataset ds = generate_dataset({cfg.data.points, cfg.data.noise, true}, cfg.data.train_count,
                                          cfg.data.test_count, cfg.seed);
      write_dataset(dir, ds);
      std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test clouds to " << dir.string()
                << '\n';
    } else if (*pre) {
      const RunConfig cfg = resolve(pre_a, Task::pretrain);
      const auto res = run_pretrain(cfg, open_dataset(cfg), cfg.out_dir);
      if (!res.losses.empty())
        std::printf("pretrain: %zu steps, loss %.6f -> %.6f, checkpoint %s\n", res.losses.size(), res.losses.front(),
                    res.losses.back(), (fs::path(cfg.out_dir) / "final.plma").c_str());
    } else if (*fin) {
      const RunConfig cfg = resolve(fin_a, fin_task == "seg" ? Task::finetune_seg : Task::finetune_cls);
      const auto ckpt = maybe_checkpoint(fin_ckpt, cfg);
      const auto res = run_finetune(cfg, open_dataset(cfg), ckpt ? &*ckpt : nullptr, cfg.out_dir);
      if (cfg.task == Task::finetune_seg)
        std::printf("finetune_seg: instance mIoU %.2f%%, class mIoU %.2f%%, point accuracy %.2f%%\n",
                    100 * res.segmentation.instance_miou, 100 * res.segmentation.class_miou, 100 * res.test_accuracy);
      else
        std::printf("finetune_cls: test accuracy %.2f%%\n", 100 * res.test_accuracy);
    } else if (*abl) {
      const RunConfig cfg = resolve(abl_a, Task::finetune_cls);
      const auto cells = run_ablation(cfg, open_dataset(cfg), cfg.out_dir);
      std::cout << ablation_markdown(cells);
    } else if (*prb) {
      const RunConfig cfg = resolve(prb_a, Task::probe);
      const auto ckpt = maybe_checkpoint(prb_ckpt, cfg);
      std::cout << run_probe(cfg, open_dataset(cfg), ckpt ? &*ckpt : nullptr, cfg.out_dir).dump(2) << '\n';
    } else if (*ins) {
      return inspect(ins_path, ins_json);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
