#include "difflab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <new>
#include <sstream>
#include <thread>

#include "difflab/errors.hpp"
#include "difflab/sampler.hpp"

#ifndef DIFFLAB_VERSION
#define DIFFLAB_VERSION "dev"
#endif

namespace difflab {

namespace fs = std::filesystem;

double wall_clock_timer(const std::function<void()>& body) {
  const auto start = std::chrono::steady_clock::now();
  body();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void BenchConfig::validate() const {
  if (lengths.empty()) throw ConfigError("bench.lengths must not be empty");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw ConfigError("bench.lengths must be positive");
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw ConfigError("bench.lengths must be strictly increasing");
  }
  if (steps == 0) throw ConfigError("bench.steps must be at least 1");
  if (warmup < 1) throw ConfigError("bench.warmup must be at least 1");
  if (runs < 2) throw ConfigError("bench.runs must be at least 2");
  if (batch < 1) throw ConfigError("bench.batch must be at least 1");
  if (backbones.empty()) throw ConfigError("bench.backbones must name at least one backbone");
  if (!(fit_fraction > 0.0 && fit_fraction <= 1.0)) throw ConfigError("bench fit fraction must lie in (0, 1]");
  for (const auto& b : backbones) b.config.validate();
}

std::vector<Backbone> matched_backbones(const ModelConfig& base, const std::vector<std::string>& names) {
  std::vector<Backbone> out;
  for (const auto& name : names) {
    ModelConfig c = base;
    c.pattern_kind = parse_pattern_kind(name);
    out.push_back({name, c});
  }
  return out;
}

LatencyStats measure_decode(const Denoiser<float>& model, std::size_t length, std::size_t steps,
                            std::size_t warmup, std::size_t runs, std::size_t batch, std::uint64_t seed,
                            const Timer& timer) {
  if (length > model.context_len()) {
    throw ConfigError("bench length " + std::to_string(length) + " exceeds model context " +
                      std::to_string(model.context_len()));
  }
  if (runs == 0 || batch == 0) throw ConfigError("measure_decode needs runs >= 1 and batch >= 1");
  auto decode = [&](std::size_t run) {
    for (std::size_t b = 0; b < batch; ++b) {
      SamplerConfig sc;
      sc.steps = steps;
      sc.length = length;
      sc.seed = seed + run * batch + b;
      (void)generate(model, sc);
    }
  };
  for (std::size_t w = 0; w < warmup; ++w) decode(w);

  LatencyStats stats;
  for (std::size_t r = 0; r < runs; ++r) {
    stats.durations.push_back(timer([&] { decode(warmup + r); }));
  }
  const auto n = static_cast<double>(runs);
  double total = 0.0;
  for (double d : stats.durations) total += d;
  stats.mean_s = total / n;
  std::vector<double> sorted = stats.durations;
  std::sort(sorted.begin(), sorted.end());
  stats.median_s = runs % 2 == 1 ? sorted[runs / 2] : 0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2]);
  double sq = 0.0;
  for (double d : stats.durations) sq += (d - stats.mean_s) * (d - stats.mean_s);
  stats.std_s = runs > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
  stats.tokens_per_s = stats.mean_s > 0.0 ? static_cast<double>(batch * length) / stats.mean_s : 0.0;
  return stats;
}

ExponentFit fit_scaling_exponent(std::span<const std::pair<double, double>> points) {
  if (points.size() < 4) {
    throw DomainError("exponent fit needs at least 4 points, got " + std::to_string(points.size()));
  }
  std::vector<double> xs, ys;
  for (const auto& [l, latency] : points) {
    if (!(l > 0.0) || !(latency > 0.0)) throw DomainError("exponent fit needs positive lengths and latencies");
    xs.push_back(std::log(l));
    ys.push_back(std::log(latency));
  }
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) throw DomainError("exponent fit needs at least two distinct lengths");
  ExponentFit fit;
  fit.exponent = sxy / sxx;
  fit.intercept = my - fit.exponent * mx;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    fit.residual = std::max(fit.residual, std::abs(ys[i] - (fit.intercept + fit.exponent * xs[i])));
  }
  return fit;
}

std::vector<const BenchCell*> ScalingReport::cells_for(const std::string& backbone) const {
  std::vector<const BenchCell*> out;
  for (const auto& c : cells) {
    if (c.backbone == backbone) out.push_back(&c);
  }
  return out;
}

std::vector<std::size_t> fit_window(const std::vector<std::size_t>& lengths, double fraction) {
  auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(lengths.size())));
  count = std::min(lengths.size(), std::max<std::size_t>(count, 4));
  return {lengths.end() - static_cast<std::ptrdiff_t>(count), lengths.end()};
}

ScalingReport run_sweep(const BenchConfig& config, const Timer& timer) {
  config.validate();
  ScalingReport report;
  report.steps = config.steps;
  report.batch = config.batch;
  report.runs = config.runs;
  const std::size_t max_len = config.lengths.back();
  for (const auto& backbone : config.backbones) {
    ModelConfig mc = backbone.config;
    mc.context_len = std::max(mc.context_len, max_len);
    std::optional<DenoiserModel<float>> model;
    try {
      model.emplace(mc, config.seed);
    } catch (const std::bad_alloc&) {
      report.skipped.push_back(backbone.name + ",*: out of memory constructing the model");
      continue;
    }
    for (std::size_t length : config.lengths) {
      try {
        report.cells.push_back({backbone.name, length,
                                measure_decode(*model, length, config.steps, config.warmup, config.runs,
                                               config.batch, config.seed, timer)});
      } catch (const std::bad_alloc&) {
        report.skipped.push_back(backbone.name + "," + std::to_string(length) + ": out of memory");
      }
    }
  }
  std::stable_sort(report.cells.begin(), report.cells.end(), [](const BenchCell& a, const BenchCell& b) {
    return a.backbone != b.backbone ? a.backbone < b.backbone : a.length < b.length;
  });

  const std::vector<std::size_t> window = fit_window(config.lengths, config.fit_fraction);
  for (const auto& backbone : config.backbones) {
    std::vector<std::pair<double, double>> points;
    for (const BenchCell* c : report.cells_for(backbone.name)) {
      if (std::find(window.begin(), window.end(), c->length) != window.end()) {
        points.emplace_back(static_cast<double>(c->length), c->stats.mean_s);
      }
    }
    if (points.size() >= 4) report.fits[backbone.name] = fit_scaling_exponent(points);
  }
  return report;
}

void write_csv(const ScalingReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "# difflab " << DIFFLAB_VERSION << '\n';
  out << "# hardware_threads=" << std::thread::hardware_concurrency() << " decode_workers=1\n";
  out << "# steps=" << report.steps << " batch=" << report.batch << " runs=" << report.runs << '\n';
  for (const auto& s : report.skipped) out << "# skipped " << s << '\n';
  out << std::setprecision(9);
  for (const auto& [name, fit] : report.fits) {
    out << "# fit " << name << " exponent=" << fit.exponent << " residual=" << fit.residual << '\n';
  }
  out << "backbone,L,S,batch,runs,mean_s,median_s,std_s,tokens_per_s\n";
  for (const auto& c : report.cells) {
    out << c.backbone << ',' << c.length << ',' << report.steps << ',' << report.batch << ','
        << c.stats.durations.size() << ',' << c.stats.mean_s << ',' << c.stats.median_s << ','
        << c.stats.std_s << ',' << c.stats.tokens_per_s << '\n';
  }
}

namespace {

struct Panel {
  std::string title;
  std::string y_label;
  double x0;  // left edge in the SVG
};

}  // namespace

void write_svg(const ScalingReport& report, const fs::path& path) {
  constexpr double kWidth = 420, kHeight = 300, kMargin = 55, kTop = 30;
  static const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::vector<std::string> names;
  for (const auto& c : report.cells) {
    if (std::find(names.begin(), names.end(), c.backbone) == names.end()) names.push_back(c.backbone);
  }

  std::ostringstream svg;
  svg << std::setprecision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * kWidth << "\" height=\""
      << kHeight + 20 * static_cast<double>(names.size()) + 20 << "\" font-family=\"sans-serif\" font-size=\"11\">\n";

  const Panel panels[] = {{"Throughput vs L (log-log)", "tokens/s", 0.0},
                          {"Latency vs L (log-log)", "seconds", kWidth}};
  for (int p = 0; p < 2; ++p) {
    const Panel& panel = panels[p];
    auto metric = [p](const BenchCell& c) { return p == 0 ? c.stats.tokens_per_s : c.stats.mean_s; };
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& c : report.cells) {
      if (metric(c) <= 0.0) continue;
      xmin = std::min(xmin, std::log10(static_cast<double>(c.length)));
      xmax = std::max(xmax, std::log10(static_cast<double>(c.length)));
      ymin = std::min(ymin, std::log10(metric(c)));
      ymax = std::max(ymax, std::log10(metric(c)));
    }
    if (!(xmax > xmin)) { xmin -= 0.5; xmax += 0.5; }
    if (!(ymax > ymin)) { ymin -= 0.5; ymax += 0.5; }
    const double left = panel.x0 + kMargin, right = panel.x0 + kWidth - 15;
    const double top = kTop, bottom = kHeight - 35;
    auto sx = [&](double lx) { return left + (lx - xmin) / (xmax - xmin) * (right - left); };
    auto sy = [&](double ly) { return bottom - (ly - ymin) / (ymax - ymin) * (bottom - top); };

    svg << "<text x=\"" << (left + right) / 2 << "\" y=\"18\" text-anchor=\"middle\">" << panel.title << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << right - left << "\" height=\""
        << bottom - top << "\" fill=\"none\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << (left + right) / 2 << "\" y=\"" << bottom + 28
        << "\" text-anchor=\"middle\">sequence length L</text>\n";
    svg << "<text x=\"" << panel.x0 + 12 << "\" y=\"" << (top + bottom) / 2 << "\" transform=\"rotate(-90 "
        << panel.x0 + 12 << ' ' << (top + bottom) / 2 << ")\" text-anchor=\"middle\">" << panel.y_label
        << "</text>\n";
    for (const auto& c : report.cells_for(names.empty() ? "" : names.front())) {
      const double lx = std::log10(static_cast<double>(c->length));
      svg << "<text x=\"" << sx(lx) << "\" y=\"" << bottom + 14 << "\" text-anchor=\"middle\">" << c->length
          << "</text>\n";
    }
    for (int e = static_cast<int>(std::ceil(ymin)); e <= static_cast<int>(std::floor(ymax)); ++e) {
      svg << "<text x=\"" << left - 4 << "\" y=\"" << sy(e) + 4 << "\" text-anchor=\"end\">1e" << e << "</text>\n";
    }
    for (std::size_t n = 0; n < names.size(); ++n) {
      svg << "<polyline fill=\"none\" stroke=\"" << kColors[n % 6] << "\" stroke-width=\"2\" points=\"";
      for (const BenchCell* c : report.cells_for(names[n])) {
        if (metric(*c) <= 0.0) continue;
        svg << sx(std::log10(static_cast<double>(c->length))) << ',' << sy(std::log10(metric(*c))) << ' ';
      }
      svg << "\"/>\n";
    }
  }
  for (std::size_t n = 0; n < names.size(); ++n) {
    const double y = kHeight + 10 + 20 * static_cast<double>(n);
    svg << "<line x1=\"" << kMargin << "\" y1=\"" << y << "\" x2=\"" << kMargin + 25 << "\" y2=\"" << y
        << "\" stroke=\"" << kColors[n % 6] << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << kMargin + 32 << "\" y=\"" << y + 4 << "\">" << names[n] << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << svg.str();
}

fs::path write_artifacts(const ScalingReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::ostringstream stem;
  stem << "bench-" << std::put_time(&utc, "%Y%m%dT%H%M%SZ");
  fs::path csv = dir / (stem.str() + ".csv");
  for (int k = 1; fs::exists(csv); ++k) csv = dir / (stem.str() + "-" + std::to_string(k) + ".csv");
  write_csv(report, csv);
  fs::path svg = csv;
  svg.replace_extension(".svg");
  write_svg(report, svg);
  return csv;
}

}  // namespace difflab
