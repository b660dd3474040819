#pragma once

// Subcommand bodies. Each takes a RunConfig plus explicit paths and writes its
// artifacts to disk; the CLI only parses flags and calls these.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "arfm/bench.hpp"
#include "arfm/config.hpp"
#include "arfm/io.hpp"
#include "arfm/metrics.hpp"
#include "arfm/train.hpp"

namespace arfm::pipeline {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

inline void log_line(const Logger& log, const std::string& s) {
  if (log) log(s);
}

inline std::string sample_name(const char* prefix, std::size_t i, const char* ext = ".pft") {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu%s", prefix, i, ext);
  return buf;
}

// ---------------------------------------------------------------------------

inline io::DatasetInfo gen_data(const RunConfig& cfg, const fs::path& out, const Logger& log = {}) {
  validate(cfg);
  const World world(cfg.world);
  SeededRng nrng(cfg.seed, 0x4E0A);
  io::DatasetInfo info;
  info.world = cfg.world;
  info.norm = compute_norm_stats(world, cfg.data.norm_segments, nrng, cfg.data.seconds);
  info.seconds = cfg.data.seconds;
  io::DatasetWriter writer(out, info);
  const SeededRng root(cfg.seed, 0xDA7A);
  for (std::size_t i = 0; i < cfg.data.n_samples; ++i) {
    SeededRng r = root.split(i);
    writer.add(gen_sample(world, r, cfg.data.seconds));
  }
  writer.finish();
  info.count = cfg.data.n_samples;
  log_line(log, "wrote " + std::to_string(info.count) + " samples to " + out.string());
  return info;
}

// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::vector<StepLog>& rows, const fs::path& path) {
  std::ofstream f(path);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + path.string());
  f << "step,loss,lr,grad_norm\n";
  char buf[160];
  for (const StepLog& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g\n", r.step, r.loss, r.lr, r.grad_norm);
    f << buf;
  }
  ARFM_CHECK(f.good(), ErrorKind::kIo, "write failed for " + path.string());
}

/// Trains from scratch (or from `init` when fine-tuning) and writes a
/// checkpoint plus loss.csv into `out`.
inline Model train_run(const RunConfig& cfg, Paradigm paradigm, const fs::path& data_dir, const fs::path& out,
                       const std::optional<fs::path>& init = std::nullopt, const Logger& log = {}) {
  validate(cfg);
  const io::DatasetInfo info = io::read_dataset_info(data_dir);
  ARFM_CHECK(info.seconds >= cfg.train.segment_seconds, ErrorKind::kConfig,
             "train: dataset samples are shorter than train.segment_seconds");
  const std::vector<WorldSample> data = io::load_dataset(data_dir, info);
  std::optional<Model> model;
  if (init) {
    model.emplace(io::load_checkpoint(*init));
    ARFM_CHECK(model->paradigm() == paradigm, ErrorKind::kConfig, "train: --init checkpoint has another paradigm");
    ARFM_CHECK(model->spec().world == info.world, ErrorKind::kConfig, "train: --init checkpoint uses another world");
  } else {
    ARFM_CHECK(cfg.train.finetune == Finetune::kNone, ErrorKind::kConfig, "train: fine-tuning requires --init");
    ModelSpec spec;
    spec.paradigm = paradigm;
    spec.shape = cfg.model;
    spec.world = info.world;
    spec.norm = info.norm;
    model.emplace(spec);
    model->init_params(cfg.seed);
  }
  const long every = std::max<long>(1, cfg.train.steps / 20);
  const std::vector<StepLog> rows = train(*model, data, cfg.train, cfg.seed, [&](const StepLog& s) {
    if (s.step % every == 0 || s.step == 1 || s.step == cfg.train.steps) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "step %ld loss %.5f lr %.3g grad_norm %.4f", s.step, s.loss, s.lr, s.grad_norm);
      log_line(log, buf);
    }
  });
  io::CheckpointMeta meta;
  meta.step = cfg.train.steps;
  meta.seed = cfg.seed;
  meta.finetune = cfg.train.finetune == Finetune::kNone ? "" : to_string(cfg.train.finetune);
  io::save_checkpoint(*model, meta, out);
  write_loss_csv(rows, out / "loss.csv");
  log_line(log, "checkpoint written to " + out.string());
  return std::move(*model);
}

// ---------------------------------------------------------------------------

/// Fresh conditioning samples drawn from the eval seed.
inline std::vector<WorldSample> eval_conditions(const World& world, const EvalConfig& ec) {
  std::vector<WorldSample> out;
  const SeededRng root(ec.seed, 0xE7A1);
  for (std::size_t i = 0; i < ec.n_samples; ++i) {
    SeededRng r = root.split(i);
    out.push_back(gen_sample(world, r, ec.seconds));
  }
  return out;
}

/// Generates one output per condition: token grids for AR, latents for FM.
struct Generated {
  std::vector<Tensor> latents;
  std::vector<TokenGrid> tokens;                  // AR only
  std::vector<std::vector<fm::TraceRow>> traces;  // FM only
  std::size_t model_evals = 0;
};

inline Generated generate(const RunConfig& cfg, const Model& m, const World& world,
                          const std::vector<WorldSample>& conds) {
  Generated g;
  if (conds.empty()) return g;
  const std::size_t frames = conds.front().tokens.length();
  if (m.paradigm() == Paradigm::kAr) {
    const SeededRng root(cfg.eval.seed, 0xA5A5);
    const std::size_t bs = std::size_t(cfg.eval.batch);
    for (std::size_t b0 = 0; b0 < conds.size(); b0 += bs) {
      std::vector<const WorldSample*> batch;
      for (std::size_t i = b0; i < std::min(conds.size(), b0 + bs); ++i) batch.push_back(&conds[i]);
      ar::DecodeStats st;
      for (TokenGrid& t : ar::sample(m, batch, frames, cfg.ar_sampler, root.split(b0 / bs), &st)) {
        g.latents.push_back(detokenize(world, t));
        g.tokens.push_back(std::move(t));
      }
      g.model_evals += st.model_evals;
    }
  } else {
    const SeededRng root(cfg.eval.seed, 0xF10F);
    for (std::size_t i = 0; i < conds.size(); ++i) {
      SeededRng r = root.split(i);
      fm::SampleStats st;
      g.latents.push_back(fm::sample(m, fm::make_conditioning(m, conds[i]), frames, cfg.fm_sampler, r, &st));
      g.traces.push_back(std::move(st.trace));
      g.model_evals += st.model_evals;
    }
  }
  return g;
}

inline std::vector<metrics::MetricRecord> score(const World& world, const std::vector<WorldSample>& conds,
                                                const Generated& g) {
  std::vector<metrics::MetricRecord> rows;
  for (std::size_t i = 0; i < conds.size(); ++i)
    rows.push_back(metrics::eval_generation(world, g.latents[i], conds[i].controls, sample_name("eval", i, "")));
  return rows;
}

inline metrics::MetricSummary eval_run(const RunConfig& cfg, const fs::path& ckpt, const fs::path& out,
                                       const Logger& log = {}) {
  validate(cfg);
  const Model m = io::load_checkpoint(ckpt);
  const World world(m.spec().world);
  const std::vector<WorldSample> conds = eval_conditions(world, cfg.eval);
  const Generated g = generate(cfg, m, world, conds);
  const std::vector<metrics::MetricRecord> rows = score(world, conds, g);
  fs::create_directories(out);
  metrics::write_metrics_csv(rows, out / "metrics.csv");
  const metrics::MetricSummary s = metrics::summarize(rows);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s n=%zu chord_iou=%.4f beat_f1=%.4f melody_sim=%.4f", to_string(m.paradigm()), s.n,
                s.chord_iou, s.beat_f1, s.melody_sim);
  log_line(log, buf);
  return s;
}

// ---------------------------------------------------------------------------

/// Writes `n` generations (PFT1) and, for FM, the solver trace CSV.
inline void sample_run(const RunConfig& cfg, const fs::path& ckpt, const fs::path& out, std::size_t n,
                       const Logger& log = {}) {
  validate(cfg);
  const Model m = io::load_checkpoint(ckpt);
  const World world(m.spec().world);
  EvalConfig ec = cfg.eval;
  ec.n_samples = n;
  const std::vector<WorldSample> conds = eval_conditions(world, ec);
  const Generated g = generate(cfg, m, world, conds);
  fs::create_directories(out);
  for (std::size_t i = 0; i < n; ++i) {
    save_tensor(g.latents[i], out / sample_name("latent", i));
    if (!g.tokens.empty()) save_tensor(g.tokens[i].to_tensor(), out / sample_name("tokens", i));
  }
  if (m.paradigm() == Paradigm::kFm) {
    std::ofstream f(out / "trace.csv");
    ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + (out / "trace.csv").string());
    f << "sample,step,tau,h,err,accepted\n";
    char buf[160];
    for (std::size_t i = 0; i < g.traces.size(); ++i) {
      std::size_t step = 0;
      for (const fm::TraceRow& r : g.traces[i]) {
        if (r.accepted) ++step;
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%d\n", i, step, r.tau, r.h, r.err, int(r.accepted));
        f << buf;
      }
    }
  }
  log_line(log, "wrote " + std::to_string(n) + " samples (" + std::to_string(g.model_evals) + " model evals) to " +
                    out.string());
}

// ---------------------------------------------------------------------------

enum class InpaintMode { kFim, kZeroShot, kSupervised };

inline InpaintMode parse_inpaint_mode(const std::string& s) {
  if (s == "fim") return InpaintMode::kFim;
  if (s == "zs") return InpaintMode::kZeroShot;
  if (s == "sup") return InpaintMode::kSupervised;
  throw Error(ErrorKind::kConfig, "unknown inpaint mode '" + s + "' (expected fim, zs or sup)");
}

/// Inpaints a masked span of each eval sample; writes the results and a CSV of
/// spans and metrics computed over the whole sequence.
inline metrics::MetricSummary inpaint_run(const RunConfig& cfg, const fs::path& ckpt, const fs::path& out,
                                          InpaintMode mode, const Logger& log = {}) {
  validate(cfg);
  const Model m = io::load_checkpoint(ckpt);
  ARFM_CHECK((mode == InpaintMode::kFim) == (m.paradigm() == Paradigm::kAr), ErrorKind::kConfig,
             "inpaint: fim needs an ar checkpoint, zs and sup need an fm checkpoint");
  const World world(m.spec().world);
  const std::vector<WorldSample> conds = eval_conditions(world, cfg.eval);
  const SeededRng root(cfg.eval.seed, 0x1A9A);
  fs::create_directories(out);
  std::ofstream f(out / "inpaint.csv");
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + (out / "inpaint.csv").string());
  f << "sample_id,s,e,chord_iou,beat_f1,melody_sim\n";
  std::vector<metrics::MetricRecord> rows;
  for (std::size_t i = 0; i < conds.size(); ++i) {
    SeededRng r = root.split(i);
    const std::size_t len = conds[i].tokens.length();
    fm::Span sp = fm::draw_mask(cfg.train.mask_policy, len, world.spec().frame_rate, r);
    Tensor result;
    if (mode == InpaintMode::kFim) {
      sp.s = std::max<std::size_t>(1, sp.s);
      sp.e = std::min(sp.e, len - 1);
      const TokenGrid t = ar::fim_inpaint(m, conds[i], sp.s, sp.e, cfg.ar_sampler, r.split(1));
      save_tensor(t.to_tensor(), out / sample_name("tokens", i));
      result = detokenize(world, t);
    } else if (mode == InpaintMode::kZeroShot) {
      result = fm::zs_inpaint(m, conds[i], sp.s, sp.e, cfg.fm_sampler, r);
    } else {
      result = fm::sup_inpaint(m, conds[i], sp.s, sp.e, cfg.fm_sampler, r);
    }
    save_tensor(result, out / sample_name("latent", i));
    rows.push_back(metrics::eval_generation(world, result, conds[i].controls, sample_name("inpaint", i, "")));
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6f,%.6f,%.6f\n", rows.back().sample_id.c_str(), sp.s, sp.e,
                  rows.back().chord_iou, rows.back().beat_f1, rows.back().melody_sim);
    f << buf;
  }
  const metrics::MetricSummary s = metrics::summarize(rows);
  char buf[160];
  std::snprintf(buf, sizeof buf, "inpaint n=%zu chord_iou=%.4f beat_f1=%.4f melody_sim=%.4f", s.n, s.chord_iou,
                s.beat_f1, s.melody_sim);
  log_line(log, buf);
  return s;
}

// ---------------------------------------------------------------------------

inline bench::BenchPlan bench_plan(const RunConfig& cfg) {
  bench::BenchPlan p;
  p.batch_sizes = cfg.bench.batch_sizes;
  p.fm_step_counts = cfg.bench.fm_steps;
  p.warmup_iters = cfg.bench.warmup_iters;
  p.measured_iters = cfg.bench.measured_iters;
  p.seconds = cfg.bench.seconds;
  p.ar_config = cfg.ar_sampler;
  p.fm_config = cfg.fm_sampler;
  p.seed = cfg.seed;
  return p;
}

inline std::vector<bench::BenchRow> bench_run(const RunConfig& cfg, const std::optional<fs::path>& ar_ckpt,
                                              const std::optional<fs::path>& fm_ckpt, const fs::path& out_csv,
                                              const Logger& log = {}) {
  validate(cfg);
  ARFM_CHECK(ar_ckpt || fm_ckpt, ErrorKind::kConfig, "bench: give at least one of --ar and --fm");
  std::optional<Model> ar_m, fm_m;
  if (ar_ckpt) ar_m.emplace(io::load_checkpoint(*ar_ckpt));
  if (fm_ckpt) fm_m.emplace(io::load_checkpoint(*fm_ckpt));
  ARFM_CHECK(!ar_m || ar_m->paradigm() == Paradigm::kAr, ErrorKind::kConfig, "bench: --ar is not an ar checkpoint");
  ARFM_CHECK(!fm_m || fm_m->paradigm() == Paradigm::kFm, ErrorKind::kConfig, "bench: --fm is not an fm checkpoint");
  const World world(ar_m ? ar_m->spec().world : fm_m->spec().world);
  const auto rows = bench::run_bench(bench_plan(cfg), world, ar_m ? &*ar_m : nullptr, fm_m ? &*fm_m : nullptr,
                                     [&](const bench::BenchRow& r) {
                                       char buf[160];
                                       std::snprintf(buf, sizeof buf, "%s batch=%d steps=%d s/sample=%.5f evals=%ld",
                                                     r.paradigm.c_str(), r.batch, r.steps, r.s_per_sample,
                                                     r.model_evals);
                                       log_line(log, buf);
                                     });
  bench::write_csv(rows, out_csv);
  fs::path dat = out_csv;
  bench::write_plot_data(rows, dat.replace_extension(".dat"));
  return rows;
}

// ---------------------------------------------------------------------------

/// True when changing `key` only affects generation, so an existing
/// checkpoint can be re-evaluated instead of retrained.
inline bool is_sampler_key(const std::string& key) {
  return key.rfind("ar_sampler.", 0) == 0 || key.rfind("fm_sampler.", 0) == 0 || key.rfind("eval.", 0) == 0;
}

struct SweepRow {
  std::string value;
  metrics::MetricSummary summary;
};

/// Evaluates one configuration per value of `key`. Sampler keys re-evaluate
/// `ckpt`; any other key trains a fresh `paradigm` model on `data_dir` first.
inline std::vector<SweepRow> sweep_run(const RunConfig& base, const std::string& key,
                                       const std::vector<std::string>& values, Paradigm paradigm,
                                       const std::optional<fs::path>& ckpt, const std::optional<fs::path>& data_dir,
                                       const fs::path& out, const Logger& log = {}) {
  ARFM_CHECK(!values.empty(), ErrorKind::kConfig, "sweep: no values");
  (void)get_option(base, key);  // rejects unknown keys up front
  const bool sampler = is_sampler_key(key);
  ARFM_CHECK(!sampler || ckpt, ErrorKind::kConfig, "sweep: sampler keys need --ckpt");
  ARFM_CHECK(sampler || data_dir, ErrorKind::kConfig, "sweep: training keys need --data");
  fs::create_directories(out);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunConfig cfg = base;
    set_option(cfg, key, values[i]);
    validate(cfg);
    const fs::path run = out / sample_name("run", i, "");
    fs::path model_dir = sampler ? *ckpt : run / "ckpt";
    if (!sampler) train_run(cfg, paradigm, *data_dir, model_dir, std::nullopt, log);
    log_line(log, key + "=" + values[i]);
    rows.push_back({values[i], eval_run(cfg, model_dir, run, log)});
  }
  std::ofstream f(out / "sweep.csv");
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + (out / "sweep.csv").string());
  f << "key,value,n,chord_iou,beat_f1,melody_sim\n";
  char buf[200];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,%.6f\n", r.summary.n, r.summary.chord_iou, r.summary.beat_f1,
                  r.summary.melody_sim);
    f << key << ',' << r.value << buf;
  }
  return rows;
}

}  // namespace arfm::pipeline
