#include "pointlama/config.hpp"

#include <fstream>
#include <sstream>

namespace pointlama {

using nlohmann::json;

Task parse_task(const std::string& name) {
  if (name == "pretrain") return Task::pretrain;
  if (name == "finetune_cls") return Task::finetune_cls;
  if (name == "finetune_seg") return Task::finetune_seg;
  if (name == "probe") return Task::probe;
  throw ConfigError("unknown task '" + name + "'");
}

std::string to_string(Task t) {
  switch (t) {
    case Task::pretrain: return "pretrain";
    case Task::finetune_cls: return "finetune_cls";
    case Task::finetune_seg: return "finetune_seg";
    case Task::probe: return "probe";
  }
  return "unknown";
}

namespace {

ScanMode parse_scan(const std::string& s) {
  if (s == "sequential") return ScanMode::sequential;
  if (s == "parallel") return ScanMode::parallel;
  throw ConfigError("unknown scan mode '" + s + "'");
}

std::string scan_name(ScanMode m) { return m == ScanMode::parallel ? "parallel" : "sequential"; }

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// Copies `user` over `base`, rejecting keys and types the defaults do not have.
void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      merge_strict(slot, v, key);
      continue;
    }
    bool ok = false;
    if (slot.is_number_unsigned()) ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    else if (slot.is_number()) ok = v.is_number();
    else if (slot.is_string()) ok = v.is_string();
    else if (slot.is_boolean()) ok = v.is_boolean();
    else if (slot.is_array()) ok = v.is_array();
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type (" + v.type_name() + ")");
    slot = v;
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  require(data.points >= 1 && data.groups >= 1 && data.group_size >= 1, "data sizes must be positive");
  require(data.groups <= data.points, "data.groups exceeds data.points");
  require(data.group_size <= data.points, "data.group_size exceeds data.points");
  require(data.noise >= 0.0, "data.noise must be >= 0");
  require(serialization.bits >= 1 && serialization.bits <= 20, "serialization.bits must be in [1, 20]");
  require(mask.ratio >= 0.0 && mask.ratio < 1.0, "mask.ratio must be in [0, 1)");
  require(diffusion.steps >= 1, "diffusion.steps must be >= 1");
  require(diffusion.beta_start > 0.0 && diffusion.beta_start <= diffusion.beta_end && diffusion.beta_end < 1.0,
          "diffusion betas need 0 < beta_start <= beta_end < 1");
  require(optim.lr > 0.0, "optim.lr must be > 0");
  require(optim.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  require(optim.batch_size >= 1, "optim.batch_size must be >= 1");
  require(optim.backbone_lr_scale >= 0.0, "optim.backbone_lr_scale must be >= 0");
  require(optim.grad_clip >= 0.0, "optim.grad_clip must be >= 0");
  require(optim.min_lr_ratio >= 0.0 && optim.min_lr_ratio <= 1.0, "optim.min_lr_ratio must be in [0, 1]");
  require(head_hidden >= 1 && eval_batch_size >= 1, "head_hidden and eval_batch_size must be >= 1");
  require(encoder.d_model % 2 == 0, "encoder.d_model must be even");
  for (const auto& a : ablation.axes)
    require(a == "scanning" || a == "pmla" || a == "placement" || a == "latent",
            "unknown ablation axis '" + a + "'");
  try {
    encoder.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

EncoderConfig full_encoder() { return EncoderConfig{}; }

RunConfig desk_config() {
  RunConfig c;
  auto& e = c.encoder;
  e.depth = 12;
  e.pmla_positions = {6};
  e.d_model = 32;
  e.latent = 16;
  e.heads = 2;
  e.head_dim = 16;
  e.d_state = 8;
  e.expand = 2;
  e.ffn_hidden = 64;
  e.pos_hidden = 32;
  e.patch = {32, 64, 64, 32};
  return c;
}

json to_json(const RunConfig& c) {
  const auto& e = c.encoder;
  return json{
      {"task", to_string(c.task)},
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"init_checkpoint", c.init_checkpoint},
      {"checkpoint_every", c.checkpoint_every},
      {"head_hidden", c.head_hidden},
      {"eval_batch_size", c.eval_batch_size},
      {"data",
       {{"dir", c.data.dir},
        {"points", c.data.points},
        {"groups", c.data.groups},
        {"group_size", c.data.group_size},
        {"train_count", c.data.train_count},
        {"test_count", c.data.test_count},
        {"noise", c.data.noise}}},
      {"serialization", {{"strategy", to_string(c.serialization.strategy)}, {"bits", c.serialization.bits}}},
      {"mask", {{"ratio", c.mask.ratio}, {"mode", to_string(c.mask.mode)}}},
      {"encoder",
       {{"depth", e.depth},
        {"pmla_positions", e.pmla_positions},
        {"d_model", e.d_model},
        {"latent", e.latent},
        {"heads", e.heads},
        {"head_dim", e.head_dim},
        {"d_state", e.d_state},
        {"expand", e.expand},
        {"conv_kernel", e.conv_kernel},
        {"ffn_hidden", e.ffn_hidden},
        {"pos_hidden", e.pos_hidden},
        {"scan", scan_name(e.scan)},
        {"patch",
         {{"hidden1", e.patch.hidden1},
          {"hidden2", e.patch.hidden2},
          {"hidden3", e.patch.hidden3},
          {"out", e.patch.out}}}}},
      {"diffusion",
       {{"steps", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"decoder_blocks", c.diffusion.decoder_blocks}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"weight_decay", c.optim.weight_decay},
        {"steps", c.optim.steps},
        {"batch_size", c.optim.batch_size},
        {"warmup_steps", c.optim.warmup_steps},
        {"backbone_lr_scale", c.optim.backbone_lr_scale},
        {"grad_clip", c.optim.grad_clip},
        {"min_lr_ratio", c.optim.min_lr_ratio}}},
      {"ablation", {{"axes", c.ablation.axes}, {"pretrain_steps", c.ablation.pretrain_steps}}},
  };
}

RunConfig config_from_json(const json& user, const RunConfig& defaults) {
  json j = to_json(defaults);
  merge_strict(j, user, "");
  RunConfig c;
  try {
    c.task = parse_task(get<std::string>(j, "task", ""));
    c.seed = get<std::uint64_t>(j, "seed", "");
    c.out_dir = get<std::string>(j, "out_dir", "");
    c.init_checkpoint = get<std::string>(j, "init_checkpoint", "");
    c.checkpoint_every = get<std::size_t>(j, "checkpoint_every", "");
    c.head_hidden = get<std::size_t>(j, "head_hidden", "");
    c.eval_batch_size = get<std::size_t>(j, "eval_batch_size", "");

    const json& d = j["data"];
    c.data.dir = get<std::string>(d, "dir", "data");
    c.data.points = get<std::size_t>(d, "points", "data");
    c.data.groups = get<std::size_t>(d, "groups", "data");
    c.data.group_size = get<std::size_t>(d, "group_size", "data");
    c.data.train_count = get<std::size_t>(d, "train_count", "data");
    c.data.test_count = get<std::size_t>(d, "test_count", "data");
    c.data.noise = get<double>(d, "noise", "data");

    const json& s = j["serialization"];
    c.serialization.strategy = parse_strategy(get<std::string>(s, "strategy", "serialization"));
    c.serialization.bits = get<unsigned>(s, "bits", "serialization");

    const json& m = j["mask"];
    c.mask.ratio = get<double>(m, "ratio", "mask");
    c.mask.mode = parse_mask_mode(get<std::string>(m, "mode", "mask"));

    const json& e = j["encoder"];
    auto& ec = c.encoder;
    ec.depth = get<std::size_t>(e, "depth", "encoder");
    ec.pmla_positions = get<std::set<std::size_t>>(e, "pmla_positions", "encoder");
    ec.d_model = get<std::size_t>(e, "d_model", "encoder");
    ec.latent = get<std::size_t>(e, "latent", "encoder");
    ec.heads = get<std::size_t>(e, "heads", "encoder");
    ec.head_dim = get<std::size_t>(e, "head_dim", "encoder");
    ec.d_state = get<std::size_t>(e, "d_state", "encoder");
    ec.expand = get<std::size_t>(e, "expand", "encoder");
    ec.conv_kernel = get<std::size_t>(e, "conv_kernel", "encoder");
    ec.ffn_hidden = get<std::size_t>(e, "ffn_hidden", "encoder");
    ec.pos_hidden = get<std::size_t>(e, "pos_hidden", "encoder");
    ec.scan = parse_scan(get<std::string>(e, "scan", "encoder"));
    const json& p = e["patch"];
    ec.patch.hidden1 = get<std::size_t>(p, "hidden1", "encoder.patch");
    ec.patch.hidden2 = get<std::size_t>(p, "hidden2", "encoder.patch");
    ec.patch.hidden3 = get<std::size_t>(p, "hidden3", "encoder.patch");
    ec.patch.out = get<std::size_t>(p, "out", "encoder.patch");

    const json& df = j["diffusion"];
    c.diffusion.steps = get<std::size_t>(df, "steps", "diffusion");
    c.diffusion.beta_start = get<double>(df, "beta_start", "diffusion");
    c.diffusion.beta_end = get<double>(df, "beta_end", "diffusion");
    c.diffusion.decoder_blocks = get<std::size_t>(df, "decoder_blocks", "diffusion");

    const json& o = j["optim"];
    c.optim.lr = get<double>(o, "lr", "optim");
    c.optim.weight_decay = get<double>(o, "weight_decay", "optim");
    c.optim.steps = get<std::size_t>(o, "steps", "optim");
    c.optim.batch_size = get<std::size_t>(o, "batch_size", "optim");
    c.optim.warmup_steps = get<std::size_t>(o, "warmup_steps", "optim");
    c.optim.backbone_lr_scale = get<double>(o, "backbone_lr_scale", "optim");
    c.optim.grad_clip = get<double>(o, "grad_clip", "optim");
    c.optim.min_lr_ratio = get<double>(o, "min_lr_ratio", "optim");

    const json& a = j["ablation"];
    c.ablation.axes = get<std::vector<std::string>>(a, "axes", "ablation");
    c.ablation.pretrain_steps = get<std::size_t>(a, "pretrain_steps", "ablation");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& defaults) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, defaults);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override '" + key + "' walks through a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError("override '" + key + "' walks through a non-object");
  (*node)[parts.back()] = std::move(value);
}

}  // namespace pointlama
