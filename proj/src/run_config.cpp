#include "difflab/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include "difflab/corpus.hpp"
#include "difflab/errors.hpp"

namespace difflab {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"model.n_layers", "6", "number of diffusion blocks"},
      {"model.d_model", "128", "residual width"},
      {"model.d_head", "32", "attention head width"},
      {"model.d_state", "16", "SSM state size"},
      {"model.mlp_ratio", "0", "MLP expansion (2 or 4); 0 picks 4 for attention_only, 2 otherwise"},
      {"model.use_mlp", "true", "append an MLP sublayer to every block"},
      {"model.pattern_kind", "ssm_only", "attention_only, ssm_only or hybrid"},
      {"model.K", "5", "hybrid: one attention layer after every K SSM layers"},
      {"model.d_cond", "0", "timestep embedding width; 0 means d_model"},
      {"train.steps", "2000", "total optimizer updates"},
      {"train.batch", "16", "sequences per update"},
      {"train.lr", "0.003", "peak learning rate"},
      {"train.beta1", "0.9", "AdamW first-moment decay"},
      {"train.beta2", "0.95", "AdamW second-moment decay"},
      {"train.eps", "1e-8", "AdamW epsilon"},
      {"train.weight_decay", "0.1", "decoupled weight decay"},
      {"train.clip_norm", "1.0", "global gradient norm clip"},
      {"train.warmup", "100", "linear warmup updates"},
      {"train.min_lr_ratio", "0.1", "cosine floor as a fraction of train.lr"},
      {"train.t_min", "0.001", "lower end of the training noise level draw"},
      {"train.seed", "0", "initialization, masking and batch order seed"},
      {"train.log_interval", "10", "updates between records"},
      {"train.eval_interval", "100", "updates between held-out evaluations; 0 disables"},
      {"train.eval_mc", "4", "Monte-Carlo draws per held-out sequence"},
      {"train.eval_sequences", "16", "held-out sequences per evaluation"},
      {"train.target_ppl", "0", "stop once the evaluated bound drops below; 0 disables"},
      {"train.ckpt", "difflab.ckpt", "checkpoint path"},
      {"train.ckpt_interval", "0", "updates between checkpoints; 0 writes only the final one"},
      {"train.resume", "", "checkpoint to resume from"},
      {"train.log", "", "tab-separated record file to append to"},
      {"data.paths", "", "comma-separated corpus files or directories"},
      {"data.context_len", "256", "packed sequence length"},
      {"data.split", "0.1", "fraction of windows held out for validation"},
      {"sample.ckpt", "difflab.ckpt", "checkpoint to sample from"},
      {"sample.steps", "128", "reverse steps S"},
      {"sample.length", "256", "generated length L"},
      {"sample.temperature", "1.0", "softmax temperature for unmasking draws"},
      {"sample.seed", "0", "sampling seed"},
      {"sample.prompt", "", "text fixed at the first positions"},
      {"eval.ckpt", "difflab.ckpt", "checkpoint to evaluate"},
      {"eval.mc", "8", "Monte-Carlo draws per sequence"},
      {"eval.seed", "0", "evaluation seed"},
      {"eval.max_sequences", "0", "cap on evaluated sequences; 0 means all"},
      {"bench.lengths", "256,512,1024,2048", "strictly increasing sequence lengths"},
      {"bench.steps", "128", "reverse steps per decode"},
      {"bench.warmup", "5", "untimed decodes per cell"},
      {"bench.runs", "20", "timed decodes per cell"},
      {"bench.batch", "1", "sequences per decode"},
      {"bench.backbones", "ssm_only,attention_only,hybrid", "backbones to compare"},
      {"bench.out_dir", "bench_out", "directory for the CSV and SVG"},
      {"bench.seed", "0", "model initialization and sampling seed"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const std::string content = trim(line);
    if (content.empty() || content.front() == '#') continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(content).substr(0, eq));
    if (values_.find(key) == values_.end()) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": unknown config key '" + key + "'");
    }
    values_[key] = trim(std::string_view(content).substr(eq + 1));
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  merge_text(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()), path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  return static_cast<std::size_t>(get_u64(key));
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> RunConfig::get_sizes(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& item : get_list(key)) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("config key '" + key + "' expects integers, got '" + item + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.n_layers = get_size("model.n_layers");
  c.d_model = get_size("model.d_model");
  c.d_head = get_size("model.d_head");
  c.d_state = get_size("model.d_state");
  c.mlp_ratio = get_size("model.mlp_ratio");
  c.use_mlp = get_bool("model.use_mlp");
  c.pattern_kind = parse_pattern_kind(get("model.pattern_kind"));
  c.attention_period = get_size("model.K");
  c.d_cond = get_size("model.d_cond");
  c.vocab = ByteVocab::kModelVocab;
  c.context_len = get_size("data.context_len");
  c.validate();
  return c;
}

OptimConfig RunConfig::optim_config() const {
  OptimConfig c;
  c.lr = get_double("train.lr");
  c.beta1 = get_double("train.beta1");
  c.beta2 = get_double("train.beta2");
  c.eps = get_double("train.eps");
  c.weight_decay = get_double("train.weight_decay");
  c.clip_norm = get_double("train.clip_norm");
  c.warmup_steps = get_size("train.warmup");
  c.total_steps = get_size("train.steps");
  c.min_lr_ratio = get_double("train.min_lr_ratio");
  c.validate();
  return c;
}

FitConfig RunConfig::fit_config() const {
  FitConfig c;
  c.steps = get_size("train.steps");
  c.batch = get_size("train.batch");
  c.seed = get_u64("train.seed");
  c.log_interval = get_size("train.log_interval");
  c.eval_interval = get_size("train.eval_interval");
  c.eval_mc = get_size("train.eval_mc");
  c.eval_sequences = get_size("train.eval_sequences");
  c.target_ppl = get_double("train.target_ppl");
  c.ckpt_path = get("train.ckpt");
  c.ckpt_interval = get_size("train.ckpt_interval");
  c.log_path = get("train.log");
  c.schedule.t_min = get_double("train.t_min");
  c.validate();
  return c;
}

SamplerConfig RunConfig::sampler_config() const {
  SamplerConfig c;
  c.steps = get_size("sample.steps");
  c.length = get_size("sample.length");
  c.temperature = get_double("sample.temperature");
  c.seed = get_u64("sample.seed");
  const std::vector<std::int32_t> prompt = encode(get("sample.prompt"));
  for (std::size_t i = 0; i < prompt.size(); ++i) c.prompt.emplace_back(i, prompt[i]);
  c.validate();
  return c;
}

BenchConfig RunConfig::bench_config() const {
  BenchConfig c;
  c.lengths = get_sizes("bench.lengths");
  c.steps = get_size("bench.steps");
  c.warmup = get_size("bench.warmup");
  c.runs = get_size("bench.runs");
  c.batch = get_size("bench.batch");
  c.seed = get_u64("bench.seed");
  ModelConfig base;
  base.n_layers = get_size("model.n_layers");
  base.d_model = get_size("model.d_model");
  base.d_head = get_size("model.d_head");
  base.d_state = get_size("model.d_state");
  base.mlp_ratio = get_size("model.mlp_ratio");
  base.use_mlp = get_bool("model.use_mlp");
  base.attention_period = get_size("model.K");
  base.d_cond = get_size("model.d_cond");
  base.vocab = ByteVocab::kModelVocab;
  base.context_len = c.lengths.empty() ? 1 : *std::max_element(c.lengths.begin(), c.lengths.end());
  c.backbones = matched_backbones(base, get_list("bench.backbones"));
  c.validate();
  return c;
}

}  // namespace difflab
