#pragma once

// Throughput/latency harness for AR (cached decoding) and FM (Euler at fixed
// step counts).

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "arfm/ar.hpp"
#include "arfm/fm.hpp"

namespace arfm::bench {

struct BenchPlan {
  std::vector<int> batch_sizes = {1, 2, 4, 8, 16, 32};
  ar::ArSamplerConfig ar_config;
  fm::FmSamplerConfig fm_config;  // solver is forced to Euler; n_steps comes from fm_step_counts
  std::vector<int> fm_step_counts = {10, 25, 50, 200};
  int warmup_iters = 3;
  int measured_iters = 10;
  double seconds = 2.0;
  std::uint64_t seed = 4242;

  void validate() const {
    ARFM_CHECK(!batch_sizes.empty() && batch_sizes.front() >= 1 &&
                   std::is_sorted(batch_sizes.begin(), batch_sizes.end()),
               ErrorKind::kConfig, "bench: batch sizes must be ascending and positive");
    ARFM_CHECK(warmup_iters >= 0 && measured_iters >= 1, ErrorKind::kConfig, "bench: iters must be >= 1");
    ARFM_CHECK(seconds > 0.0, ErrorKind::kConfig, "bench: seconds must be positive");
    for (int s : fm_step_counts) ARFM_CHECK(s >= 1, ErrorKind::kConfig, "bench: fm step counts must be >= 1");
  }
};

/// One measured configuration. `wall_s` covers all measured iterations
/// (median iteration time times the iteration count); failed rows hold -1.
struct BenchRow {
  std::string paradigm;
  int batch = 0;
  int steps = 0;  // FM only
  double wall_s = 0.0, samples_per_s = 0.0, s_per_sample = 0.0;
  long model_evals = 0;  // per sample

  bool failed() const { return wall_s < 0.0; }
  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

inline double median(std::vector<double> v) {
  ARFM_CHECK(!v.empty(), ErrorKind::kInvalidArgument, "median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median seconds per call of `fn` after `warmup` untimed calls.
inline double time_median(const std::function<void()>& fn, int warmup, int iters) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  for (int i = 0; i < iters; ++i) {
    const auto a = std::chrono::steady_clock::now();
    fn();
    const auto b = std::chrono::steady_clock::now();
    t.push_back(std::chrono::duration<double>(b - a).count());
  }
  return median(std::move(t));
}

inline BenchRow make_row(std::string paradigm, int batch, int steps, double per_iter, int iters, long evals) {
  BenchRow r;
  r.paradigm = std::move(paradigm);
  r.batch = batch;
  r.steps = steps;
  r.model_evals = evals;
  r.wall_s = per_iter * iters;
  r.s_per_sample = r.wall_s / (double(iters) * batch);
  r.samples_per_s = 1.0 / r.s_per_sample;
  return r;
}

inline BenchRow failed_row(std::string paradigm, int batch, int steps) {
  BenchRow r;
  r.paradigm = std::move(paradigm);
  r.batch = batch;
  r.steps = steps;
  r.wall_s = r.samples_per_s = r.s_per_sample = -1.0;
  r.model_evals = -1;
  return r;
}

/// Model evaluations per AR sample: one per delayed column, doubled under CFG.
inline long ar_evals_per_sample(std::size_t frames, int n_books, double cfg_coef) {
  return long(frames + std::size_t(n_books) - 1) * (cfg_coef == 1.0 ? 1 : 2);
}

inline long fm_evals_per_sample(int n_steps, double cfg_coef) {
  return long(n_steps) * long(fm::evals_per_call(cfg_coef));
}

/// Runs the plan on whichever models are given (null skips that paradigm).
/// A configuration that throws (including std::bad_alloc) yields a failed row.
inline std::vector<BenchRow> run_bench(const BenchPlan& plan, const World& world, const Model* ar_model,
                                       const Model* fm_model,
                                       const std::function<void(const BenchRow&)>& on_row = {}) {
  plan.validate();
  std::vector<BenchRow> rows;
  auto emit = [&](BenchRow r) {
    if (on_row) on_row(r);
    rows.push_back(std::move(r));
  };
  const std::size_t frames = world.spec().frames(plan.seconds);
  std::vector<WorldSample> conds;
  SeededRng crng(plan.seed, 0xBE7C);
  for (int i = 0; i < plan.batch_sizes.back(); ++i) {
    SeededRng r = crng.split(std::uint64_t(i));
    conds.push_back(gen_sample(world, r, plan.seconds));
  }

  if (ar_model) {
    for (int b : plan.batch_sizes) {
      try {
        std::vector<const WorldSample*> batch;
        for (int i = 0; i < b; ++i) batch.push_back(&conds[std::size_t(i)]);
        std::uint64_t it = 0;
        const double t = time_median(
            [&] { ar::sample(*ar_model, batch, frames, plan.ar_config, SeededRng(plan.seed, it++)); },
            plan.warmup_iters, plan.measured_iters);
        emit(make_row("ar", b, 0, t, plan.measured_iters,
                      ar_evals_per_sample(frames, world.spec().n_codebooks, plan.ar_config.cfg_coef)));
      } catch (const std::exception&) {
        emit(failed_row("ar", b, 0));
      }
    }
  }
  if (fm_model) {
    fm::FmSamplerConfig cfg = plan.fm_config;
    cfg.solver = fm::Solver::kEuler;
    for (int steps : plan.fm_step_counts) {
      cfg.n_steps = steps;
      for (int b : plan.batch_sizes) {
        try {
          std::vector<fm::Conditioning> cs;
          for (int i = 0; i < b; ++i) cs.push_back(fm::make_conditioning(*fm_model, conds[std::size_t(i)]));
          std::uint64_t it = 0;
          const double t = time_median(
              [&] {
                SeededRng r(plan.seed, it++);
                for (const fm::Conditioning& c : cs) fm::sample(*fm_model, c, frames, cfg, r);
              },
              plan.warmup_iters, plan.measured_iters);
          emit(make_row("fm", b, steps, t, plan.measured_iters, fm_evals_per_sample(steps, cfg.cfg_coef)));
        } catch (const std::exception&) {
          emit(failed_row("fm", b, steps));
        }
      }
    }
  }
  return rows;
}

inline constexpr const char* kCsvHeader = "paradigm,batch,steps,wall_s,samples_per_s,s_per_sample,model_evals";

inline void write_csv(const std::vector<BenchRow>& rows, const std::filesystem::path& path) {
  ARFM_CHECK(!rows.empty(), ErrorKind::kInvalidArgument, "bench report: no rows");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + path.string());
  f << kCsvHeader << '\n';
  char buf[256];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%.17g,%ld\n", r.paradigm.c_str(), r.batch, r.steps, r.wall_s,
                  r.samples_per_s, r.s_per_sample, r.model_evals);
    f << buf;
  }
  ARFM_CHECK(f.good(), ErrorKind::kIo, "write failed for " + path.string());
}

/// Whitespace-separated curves (one block per paradigm/steps) for plotting.
inline void write_plot_data(const std::vector<BenchRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + path.string());
  std::string key;
  for (const BenchRow& r : rows) {
    const std::string k = r.paradigm + " " + std::to_string(r.steps);
    if (k != key) {
      if (!key.empty()) f << "\n\n";
      f << "# " << r.paradigm << (r.paradigm == "fm" ? " steps=" + std::to_string(r.steps) : "") << "\n";
      f << "# batch samples_per_s s_per_sample\n";
      key = k;
    }
    f << r.batch << ' ' << r.samples_per_s << ' ' << r.s_per_sample << '\n';
  }
}

inline std::vector<BenchRow> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  ARFM_CHECK(line == kCsvHeader, ErrorKind::kFormat, path.string() + ": unexpected header");
  std::vector<BenchRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> c;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    ARFM_CHECK(c.size() == 7, ErrorKind::kFormat, path.string() + ": expected 7 columns");
    BenchRow r;
    try {
      r.paradigm = c[0];
      r.batch = std::stoi(c[1]);
      r.steps = std::stoi(c[2]);
      r.wall_s = std::stod(c[3]);
      r.samples_per_s = std::stod(c[4]);
      r.s_per_sample = std::stod(c[5]);
      r.model_evals = std::stol(c[6]);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kFormat, path.string() + ": bad number in '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace arfm::bench
