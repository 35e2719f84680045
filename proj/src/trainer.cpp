#include "difflab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "difflab/checkpoint.hpp"
#include "difflab/rng.hpp"

namespace difflab {

namespace {

constexpr std::uint64_t kBatchTag = 0x6261746368000000ULL;
constexpr std::uint64_t kEvalTag = 0x6576616c00000000ULL;

}  // namespace

void OptimConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite value >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
    throw ConfigError("train.min_lr_ratio must lie in [0, 1]");
  }
}

double learning_rate(const OptimConfig& config, std::size_t step) {
  if (step < config.warmup_steps) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  const double floor = config.lr * config.min_lr_ratio;
  if (config.total_steps <= config.warmup_steps || step >= config.total_steps) return floor;
  const double progress = static_cast<double>(step - config.warmup_steps) /
                          static_cast<double>(config.total_steps - config.warmup_steps);
  return floor + 0.5 * (config.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Real>
OptimState<Real> OptimState<Real>::zeros(const OptimConfig& config,
                                         std::span<const NamedParameter<Real>> params) {
  OptimState state;
  state.config = config;
  for (const auto& p : params) {
    state.m.emplace_back(p.var.shape());
    state.v.emplace_back(p.var.shape());
  }
  return state;
}

template <typename Real>
void adamw_update(std::span<const NamedParameter<Real>> params, OptimState<Real>& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state holds " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var<Real>& var = params[i].var;
    if (state.m[i].shape() != var.shape() || state.v[i].shape() != var.shape()) {
      throw DimensionError("optimizer moments for '" + params[i].name + "' have shape " +
                           shape_to_string(state.m[i].shape()) + ", parameter has " +
                           shape_to_string(var.shape()));
    }
    if (var.has_grad() && !var.grad().all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
    }
  }

  const OptimConfig& c = state.config;
  state.step += 1;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<Real> var = params[i].var;
    Tensor<Real>& value = var.mutable_value();
    const Real* grad = var.has_grad() ? var.grad().data() : nullptr;
    Real* m = state.m[i].data();
    Real* v = state.v[i].data();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad != nullptr ? static_cast<double>(grad[k]) : 0.0;
      const double mk = c.beta1 * static_cast<double>(m[k]) + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * static_cast<double>(v[k]) + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double step = lr * (mk / bias1) / (std::sqrt(vk / bias2) + c.eps);
      value[k] = static_cast<Real>(static_cast<double>(value[k]) * decay - step);
    }
  }
}

template <typename Real>
double clip_grad_norm(std::span<const NamedParameter<Real>> params, double clip_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (Real g : p.var.grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      Var<Real> var = p.var;
      for (Real& g : var.mutable_grad().values()) g = static_cast<Real>(static_cast<double>(g) * scale);
    }
  }
  return norm;
}

TrainRecord train_step(DenoiserModel<float>& model, std::span<const TokenSequence> batch,
                       OptimState<float>& state, const NoiseSchedule& schedule, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t index = state.step;
  model.zero_grad();
  MdmLoss loss = mdm_loss<float>(model, batch, schedule, RngStream(seed).fork(index), true);
  if (!std::isfinite(loss.mean)) {
    throw NumericError("non-finite loss at step " + std::to_string(index + 1) +
                       "; resume from the last checkpoint with a lower train.lr");
  }
  std::span<const NamedParameter<float>> params(model.parameters());
  TrainRecord record;
  record.loss = loss.mean;
  record.grad_norm = clip_grad_norm(params, state.config.clip_norm);
  if (!std::isfinite(record.grad_norm)) {
    throw NumericError("non-finite gradient norm at step " + std::to_string(index + 1) +
                       "; resume from the last checkpoint with a lower train.lr");
  }
  record.lr = learning_rate(state.config, index);
  adamw_update(params, state, record.lr);
  model.zero_grad();
  record.step = state.step;

  std::size_t tokens = 0;
  for (const auto& seq : batch) tokens += seq.size();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  record.tokens_per_s = seconds > 0.0 ? static_cast<double>(tokens) / seconds : 0.0;
  return record;
}

void FitConfig::validate() const {
  if (batch == 0) throw ConfigError("train.batch must be at least 1");
  if (log_interval == 0) throw ConfigError("train.log_interval must be at least 1");
  if (eval_interval != 0 && (eval_mc == 0 || eval_sequences == 0)) {
    throw ConfigError("train.eval_mc and train.eval_sequences must be at least 1");
  }
  if (ckpt_interval != 0 && ckpt_path.empty()) {
    throw ConfigError("train.ckpt_interval needs a checkpoint path");
  }
  schedule.validate();
}

std::string format_record(const TrainRecord& record) {
  std::ostringstream os;
  os.precision(9);
  os << record.step << '\t' << record.loss << '\t' << record.grad_norm << '\t' << record.lr << '\t'
     << record.tokens_per_s;
  if (record.ppl_bound) os << '\t' << *record.ppl_bound;
  return os.str();
}

FitResult fit(DenoiserModel<float>& model, OptimState<float>& state,
              std::span<const TokenSequence> train, std::span<const TokenSequence> valid,
              const FitConfig& config, const std::function<void(const TrainRecord&)>& on_record) {
  config.validate();
  state.config.validate();
  if (train.empty()) throw DomainError("fit: empty training corpus");
  if (state.m.size() != model.parameters().size()) {
    throw DimensionError("fit: optimizer state does not match the model");
  }
  std::span<const TokenSequence> eval_set = valid.empty() ? train : valid;
  eval_set = eval_set.first(std::min(eval_set.size(), config.eval_sequences));

  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path, std::ios::app);
    if (!log) throw DataError("cannot open record file '" + config.log_path.string() + "'");
  }

  FitResult result;
  std::vector<TokenSequence> batch(config.batch);
  const RngStream batch_root(mix64(config.seed ^ kBatchTag));
  while (state.step < config.steps) {
    RngStream picker = batch_root.fork(state.step);
    for (auto& seq : batch) seq = train[picker.next_u64() % train.size()];
    TrainRecord record = train_step(model, batch, state, config.schedule, config.seed);
    ++result.steps_run;

    const bool last = state.step == config.steps;
    if (config.eval_interval != 0 && (state.step % config.eval_interval == 0 || last)) {
      record.ppl_bound = nelbo_ppl_bound<float>(model, eval_set, config.eval_mc, config.schedule,
                                                RngStream(mix64(config.seed ^ kEvalTag)));
    }
    if (config.ckpt_interval != 0 && state.step % config.ckpt_interval == 0) {
      save_checkpoint(config.ckpt_path, model, &state, config.seed, state.step);
    }
    const bool stop = record.ppl_bound && config.target_ppl > 0.0 && *record.ppl_bound < config.target_ppl;
    if (state.step % config.log_interval == 0 || record.ppl_bound || last || stop) {
      if (log) log << format_record(record) << '\n' << std::flush;
      if (on_record) on_record(record);
      result.records.push_back(record);
    }
    if (stop) {
      result.reached_target = true;
      break;
    }
  }
  if (!config.ckpt_path.empty() && result.steps_run > 0) {
    save_checkpoint(config.ckpt_path, model, &state, config.seed, state.step);
  }
  return result;
}

template struct OptimState<float>;
template struct OptimState<double>;
template void adamw_update<float>(std::span<const NamedParameter<float>>, OptimState<float>&, double);
template void adamw_update<double>(std::span<const NamedParameter<double>>, OptimState<double>&,
                                   double);
template double clip_grad_norm<float>(std::span<const NamedParameter<float>>, double);
template double clip_grad_norm<double>(std::span<const NamedParameter<double>>, double);

}  // namespace difflab
