#include "difflab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "difflab/errors.hpp"

namespace difflab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kPrefixBytes = 16;  // magic + header length

std::size_t align_up(std::size_t n) {
  return (n + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

void put_floats(std::string& out, std::size_t offset, const Tensor<float>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) out[offset + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffU);
  }
}

Tensor<float> get_floats(const unsigned char* p, const Shape& shape) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | p[4 * i + b];
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

json optim_config_to_json(const OptimConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"min_lr_ratio", c.min_lr_ratio}};
}

OptimConfig optim_config_from_json(const json& j) {
  OptimConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.total_steps = j.at("total_steps").get<std::size_t>();
  c.min_lr_ratio = j.at("min_lr_ratio").get<double>();
  return c;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct Parsed {
  json header;
  std::size_t payload_start = 0;
};

Parsed parse_prefix(const std::string& bytes, const fs::path& path) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw NotACheckpointError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  if (bytes.size() < kPrefixBytes) throw IntegrityError("checkpoint header length is truncated");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = get_u64(raw + 8);
  if (header_len > bytes.size() - kPrefixBytes) {
    throw IntegrityError("checkpoint header is truncated (" + std::to_string(header_len) +
                         " bytes declared)");
  }
  Parsed parsed;
  try {
    parsed.header = json::parse(bytes.begin() + kPrefixBytes,
                                bytes.begin() + static_cast<std::ptrdiff_t>(kPrefixBytes + header_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const int version = parsed.header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  parsed.payload_start = align_up(kPrefixBytes + header_len);
  return parsed;
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"d_head", c.d_head},           {"d_state", c.d_state},
          {"mlp_ratio", c.mlp_ratio},     {"use_mlp", c.use_mlp},
          {"vocab", c.vocab},             {"context_len", c.context_len},
          {"pattern_kind", to_string(c.pattern_kind)},
          {"K", c.attention_period},      {"d_cond", c.d_cond}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_head = j.at("d_head").get<std::size_t>();
  c.d_state = j.at("d_state").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.use_mlp = j.at("use_mlp").get<bool>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.pattern_kind = parse_pattern_kind(j.at("pattern_kind").get<std::string>());
  c.attention_period = j.at("K").get<std::size_t>();
  c.d_cond = j.at("d_cond").get<std::size_t>();
  return c;
}

void save_checkpoint(const fs::path& path, const DenoiserModel<float>& model,
                     const OptimState<float>* optim, std::uint64_t seed, std::size_t step) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& p : model.parameters()) tensors.emplace_back(p.name, &p.var.value());
  if (optim != nullptr) {
    const auto& params = model.parameters();
    if (optim->m.size() != params.size() || optim->v.size() != params.size()) {
      throw DimensionError("save_checkpoint: optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < params.size(); ++i) tensors.emplace_back("optim.m." + params[i].name, &optim->m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) tensors.emplace_back("optim.v." + params[i].name, &optim->v[i]);
  }

  json directory = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t nbytes = t->size() * sizeof(float);
    directory.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset = align_up(offset + nbytes);
  }
  const std::size_t payload_size = offset;

  json header = {{"format_version", kCheckpointVersion},
                 {"model", model_config_to_json(model.config())},
                 {"tensors", directory},
                 {"optimizer", optim != nullptr},
                 {"rng", {{"seed", seed}}},
                 {"step", step},
                 {"payload_bytes", payload_size}};
  if (optim != nullptr) {
    header["optim_config"] = optim_config_to_json(optim->config);
    header["optim_step"] = optim->step;
  }
  const std::string header_text = header.dump();

  std::string bytes(kCheckpointMagic, 8);
  put_u64(bytes, header_text.size());
  bytes += header_text;
  const std::size_t payload_start = align_up(bytes.size());
  bytes.resize(payload_start + payload_size, '\0');
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    put_floats(bytes, payload_start + directory[i]["offset"].get<std::size_t>(), *tensors[i].second);
  }

  const fs::path temp = path.string() + ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + temp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint '" + temp.string() + "'");
  }
  fs::rename(temp, path);
}

json read_checkpoint_header(const fs::path& path) {
  return parse_prefix(read_file(path), path).header;
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  Parsed parsed = parse_prefix(bytes, path);
  const json& header = parsed.header;
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t available = bytes.size() > parsed.payload_start ? bytes.size() - parsed.payload_start : 0;

  std::map<std::string, Tensor<float>> loaded;
  try {
    std::size_t previous_end = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (shape.empty() || shape_numel(shape) * sizeof(float) != nbytes || offset % kPayloadAlignment != 0 ||
          offset < previous_end) {
        throw IntegrityError("checkpoint tensor '" + name + "' has an inconsistent directory entry");
      }
      if (offset + nbytes > available) {
        throw IntegrityError("checkpoint payload truncated: tensor '" + name + "' needs bytes [" +
                             std::to_string(offset) + ", " + std::to_string(offset + nbytes) +
                             ") but only " + std::to_string(available) + " are present");
      }
      loaded.emplace(name, get_floats(raw + parsed.payload_start + offset, shape));
      previous_end = offset + nbytes;
    }
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint tensor directory is malformed: ") + e.what());
  }

  ModelConfig config;
  try {
    config = model_config_from_json(header.at("model"));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint model config is malformed: ") + e.what());
  }
  LoadedCheckpoint out{DenoiserModel<float>(config, 0), std::nullopt, 0, 0};
  auto take = [&](const std::string& name) -> Tensor<float>& {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw IntegrityError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  StateDict<float> state;
  for (const auto& p : out.model.parameters()) state.emplace_back(p.name, take(p.name));
  try {
    out.model.load_state(state);
  } catch (const ConfigError& e) {
    throw IntegrityError(e.what());
  }

  if (header.value("optimizer", false)) {
    OptimState<float> optim;
    optim.config = optim_config_from_json(header.at("optim_config"));
    optim.step = header.at("optim_step").get<std::size_t>();
    for (const auto& p : out.model.parameters()) {
      for (auto* moments : {&optim.m, &optim.v}) {
        const std::string name = (moments == &optim.m ? "optim.m." : "optim.v.") + p.name;
        Tensor<float>& t = take(name);
        if (t.shape() != p.var.shape()) throw IntegrityError("checkpoint tensor '" + name + "' has the wrong shape");
        moments->push_back(std::move(t));
      }
    }
    out.optim = std::move(optim);
  }
  out.seed = header.at("rng").at("seed").get<std::uint64_t>();
  out.step = header.at("step").get<std::size_t>();
  return out;
}

}  // namespace difflab
