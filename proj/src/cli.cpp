#include "difflab/cli.hpp"

#include <functional>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "difflab/bench.hpp"
#include "difflab/checkpoint.hpp"
#include "difflab/corpus.hpp"
#include "difflab/errors.hpp"
#include "difflab/run_config.hpp"
#include "difflab/sampler.hpp"
#include "difflab/trainer.hpp"

namespace difflab {

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kRuntimeError = 3;

std::vector<std::filesystem::path> data_paths(const RunConfig& cfg) {
  std::vector<std::filesystem::path> out;
  for (const auto& p : cfg.get_list("data.paths")) out.emplace_back(p);
  if (out.empty()) throw ConfigError("data.paths is empty; pass --data FILE");
  return out;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::string text = read_corpus(data_paths(cfg));
  const std::vector<std::int32_t> ids = encode(text);
  const FitConfig fit_cfg = cfg.fit_config();
  const PackedSplit packed = pack(ids, cfg.get_size("data.context_len"), cfg.get_double("data.split"),
                                  fit_cfg.seed);
  if (packed.train.sequences.empty()) {
    throw DataError("every window landed in the validation split; lower data.split");
  }

  std::optional<DenoiserModel<float>> model;
  std::optional<OptimState<float>> state;
  if (const std::string resume = cfg.get("train.resume"); !resume.empty()) {
    LoadedCheckpoint ckpt = load_checkpoint(resume);
    if (!ckpt.optim) throw ConfigError("checkpoint '" + resume + "' has no optimizer state to resume");
    if (ckpt.model.context_len() != cfg.get_size("data.context_len")) {
      throw ConfigError("checkpoint context " + std::to_string(ckpt.model.context_len()) +
                        " differs from data.context_len");
    }
    model.emplace(std::move(ckpt.model));
    state = std::move(ckpt.optim);
    state->config.total_steps = fit_cfg.steps;
  } else {
    model.emplace(cfg.model_config(), fit_cfg.seed);
    state = OptimState<float>::zeros(cfg.optim_config(), model->parameters());
  }
  err << "model: " << model->parameter_count() << " parameters, " << packed.train.sequences.size()
      << " train / " << packed.valid.sequences.size() << " valid sequences\n";

  out << "step\tloss\tgrad_norm\tlr\tppl_bound\n";
  out << std::setprecision(9);
  FitResult result = fit(*model, *state, packed.train.sequences, packed.valid.sequences, fit_cfg,
                         [&](const TrainRecord& r) {
                           out << r.step << '\t' << r.loss << '\t' << r.grad_norm << '\t' << r.lr << '\t';
                           if (r.ppl_bound) out << *r.ppl_bound;
                           out << '\n' << std::flush;
                           err << "step " << r.step << ": " << std::fixed << std::setprecision(0)
                               << r.tokens_per_s << " tok/s\n" << std::defaultfloat;
                         });
  err << "trained " << result.steps_run << " steps; checkpoint " << fit_cfg.ckpt_path.string() << '\n';
  return 0;
}

int cmd_sample(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  LoadedCheckpoint ckpt = load_checkpoint(cfg.get("sample.ckpt"));
  const SamplerConfig sc = cfg.sampler_config();
  const TokenSequence seq = generate(ckpt.model, sc);
  out << decode(seq.ids, true) << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  LoadedCheckpoint ckpt = load_checkpoint(cfg.get("eval.ckpt"));
  const std::vector<std::int32_t> ids = encode(read_corpus(data_paths(cfg)));
  const PackedSplit packed = pack(ids, ckpt.model.context_len(), 0.0, 0);
  std::span<const TokenSequence> seqs(packed.train.sequences);
  if (const std::size_t cap = cfg.get_size("eval.max_sequences"); cap != 0 && cap < seqs.size()) {
    seqs = seqs.first(cap);
  }
  NoiseSchedule schedule;
  schedule.t_min = cfg.get_double("train.t_min");
  const double bound = nelbo_ppl_bound<float>(ckpt.model, seqs, cfg.get_size("eval.mc"), schedule,
                                              RngStream(cfg.get_u64("eval.seed")));
  err << "evaluated " << seqs.size() << " sequences x " << cfg.get_size("eval.mc") << " draws\n";
  out << std::setprecision(9) << "ppl_bound " << bound << '\n';
  return 0;
}

int cmd_bench(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const BenchConfig bc = cfg.bench_config();
  const ScalingReport report = run_sweep(bc);
  const auto csv = write_artifacts(report, cfg.get("bench.out_dir"));
  for (const auto& s : report.skipped) err << "skipped " << s << '\n';
  out << "csv " << csv.string() << '\n';
  for (const auto& [name, fit] : report.fits) {
    out << "exponent " << name << ' ' << std::setprecision(4) << fit.exponent << '\n';
  }
  return 0;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  const nlohmann::json header = read_checkpoint_header(path);
  out << "format_version=" << header.at("format_version") << '\n';
  out << "step=" << header.at("step") << '\n';
  out << "optimizer=" << (header.value("optimizer", false) ? "true" : "false") << '\n';
  out << "rng.seed=" << header.at("rng").at("seed") << '\n';
  for (const auto& [key, value] : header.at("model").items()) {
    out << key << '=' << (value.is_string() ? value.get<std::string>() : value.dump()) << '\n';
  }
  for (const auto& t : header.at("tensors")) {
    out << "tensor " << t.at("name").get<std::string>() << ' ' << t.at("shape").dump() << " offset="
        << t.at("offset") << " nbytes=" << t.at("nbytes") << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"difflab: masked discrete diffusion language model lab", "difflab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DIFFLAB_VERSION);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::pair<std::string, std::string>> overrides;
  app.add_option("--config", config_path, "key = value file merged under command-line flags");
  app.add_option("--seed", seed, "seed for every stochastic component");
  for (const auto& key : config_keys()) {
    app.add_option_function<std::string>(
           "--" + key.name, [&overrides, name = key.name](const std::string& v) { overrides.emplace_back(name, v); },
           key.help + " (default: " + (key.default_value.empty() ? "\"\"" : key.default_value) + ")")
        ->group("Config keys");
  }

  auto alias = [&overrides](CLI::App* sub, const std::string& flag, const std::string& key,
                            const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); }, help + " (" + key + ")");
  };

  CLI::App* train = app.add_subcommand("train", "train a denoiser on a text corpus");
  alias(train, "--data", "data.paths", "corpus files or directories");
  alias(train, "--steps", "train.steps", "total updates");
  alias(train, "--batch", "train.batch", "sequences per update");
  alias(train, "--lr", "train.lr", "peak learning rate");
  alias(train, "--backbone", "model.pattern_kind", "attention_only, ssm_only or hybrid");
  alias(train, "--context", "data.context_len", "sequence length");
  alias(train, "--ckpt", "train.ckpt", "checkpoint path");
  alias(train, "--resume", "train.resume", "checkpoint to resume from");
  alias(train, "--log", "train.log", "record file");

  CLI::App* sample = app.add_subcommand("sample", "generate text from a checkpoint");
  alias(sample, "--ckpt", "sample.ckpt", "checkpoint");
  alias(sample, "--len", "sample.length", "generated length");
  alias(sample, "--steps", "sample.steps", "reverse steps");
  alias(sample, "--temperature", "sample.temperature", "softmax temperature");
  alias(sample, "--prompt", "sample.prompt", "prompt text");

  CLI::App* eval = app.add_subcommand("eval", "perplexity upper bound of a checkpoint on a file");
  alias(eval, "--ckpt", "eval.ckpt", "checkpoint");
  alias(eval, "--data", "data.paths", "evaluation files");
  alias(eval, "--mc", "eval.mc", "Monte-Carlo draws per sequence");

  CLI::App* bench = app.add_subcommand("bench", "decode latency and throughput sweep");
  alias(bench, "--lengths", "bench.lengths", "sequence lengths");
  alias(bench, "--steps", "bench.steps", "reverse steps per decode");
  alias(bench, "--warmup", "bench.warmup", "untimed decodes");
  alias(bench, "--runs", "bench.runs", "timed decodes");
  alias(bench, "--batch", "bench.batch", "sequences per decode");
  alias(bench, "--backbones", "bench.backbones", "backbones");
  alias(bench, "--out-dir", "bench.out_dir", "output directory");

  CLI::App* inspect = app.add_subcommand("inspect", "print a checkpoint header");
  std::string inspect_path;
  inspect->add_option("ckpt", inspect_path, "checkpoint path")->required();

  for (CLI::App* sub : {train, sample, eval, bench, inspect}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    const CLI::App* failed = &app;
    for (const CLI::App* sub : {train, sample, eval, bench, inspect}) {
      if (sub->parsed()) failed = sub;
    }
    std::string what = e.what();
    if (argc > 1 && argv[1][0] != '-' && failed == &app) {
      what = "unknown subcommand '" + std::string(argv[1]) + "'";
    }
    err << "usage error: " << what << "\n\n" << failed->help();
    return kUsageError;
  }

  try {
    if (*inspect) return cmd_inspect(inspect_path, out);

    RunConfig cfg;
    if (!config_path.empty()) cfg.merge_file(config_path);
    if (seed) {
      for (const char* key : {"train.seed", "sample.seed", "eval.seed", "bench.seed"}) {
        cfg.set(key, std::to_string(*seed));
      }
    }
    for (const auto& [key, value] : overrides) cfg.set(key, value);
    err << "# effective config\n" << cfg.dump() << std::flush;

    if (*train) return cmd_train(cfg, out, err);
    if (*sample) return cmd_sample(cfg, out, err);
    if (*eval) return cmd_eval(cfg, out, err);
    if (*bench) return cmd_bench(cfg, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kDataError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const DomainError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NotACheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointVersionError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const IntegrityError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace difflab
