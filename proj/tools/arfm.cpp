#include <cstdio>
#include <iostream>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "arfm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace arfm;

namespace {

void print_error(const std::string& code, std::string msg) {
  for (auto& c : msg)
    if (c == '\n') c = ' ';
  std::string esc;
  for (char c : msg) {
    if (c == '"' || c == '\\') esc += '\\';
    esc += c;
  }
  std::fprintf(stderr, "error: code=%s msg=\"%s\"\n", code.c_str(), esc.c_str());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(cfgdetail::trim(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Autoregressive vs flow-matching generation on a synthetic audio-like world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Config file (key = value lines under [section] headers)");
  app.add_option("--set", sets, "Override a config key: section.key=value (repeatable)");

  std::string paradigm_s = "ar", data_dir, out, ckpt, init, solver, mode, key, values, ar_ckpt, fm_ckpt, finetune;
  std::optional<long> steps;
  std::optional<double> cfg_coef;
  std::size_t n = 4;

  auto* print = app.add_subcommand("print-config", "Print the effective configuration");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", out, "Dataset directory (default <out_dir>/data)");

  auto* train_c = app.add_subcommand("train", "Train a model on a dataset");
  train_c->add_option("--paradigm", paradigm_s, "ar or fm")->check(CLI::IsMember({"ar", "fm"}));
  train_c->add_option("--data", data_dir, "Dataset directory (default <out_dir>/data)");
  train_c->add_option("--out", out, "Checkpoint directory (default <out_dir>/<paradigm>)");
  train_c->add_option("--steps", steps, "Optimizer steps (train.steps)");
  train_c->add_option("--init", init, "Checkpoint to fine-tune from");
  train_c->add_option("--finetune", finetune, "none, fim or inpaint (train.finetune)");

  auto* sample_c = app.add_subcommand("sample", "Generate samples from a checkpoint");
  sample_c->add_option("--paradigm", paradigm_s, "ar or fm")->check(CLI::IsMember({"ar", "fm"}));
  sample_c->add_option("--ckpt", ckpt, "Checkpoint directory (default <out_dir>/<paradigm>)");
  sample_c->add_option("--out", out, "Output directory (default <ckpt>/samples)");
  sample_c->add_option("--n", n, "Number of samples");
  sample_c->add_option("--solver", solver, "FM solver: euler or dopri5");
  sample_c->add_option("--steps", steps, "FM Euler steps");
  sample_c->add_option("--cfg-coef", cfg_coef, "Guidance coefficient");

  auto* inpaint_c = app.add_subcommand("inpaint", "Inpaint masked spans of eval samples");
  inpaint_c->add_option("--mode", mode, "fim (ar), zs or sup (fm)")->required()->check(CLI::IsMember({"fim", "zs", "sup"}));
  inpaint_c->add_option("--ckpt", ckpt, "Checkpoint directory");
  inpaint_c->add_option("--out", out, "Output directory (default <ckpt>/inpaint_<mode>)");
  inpaint_c->add_option("--steps", steps, "FM Euler steps");

  auto* eval_c = app.add_subcommand("eval", "Score generations against their controls");
  eval_c->add_option("--paradigm", paradigm_s, "ar or fm")->check(CLI::IsMember({"ar", "fm"}));
  eval_c->add_option("--ckpt", ckpt, "Checkpoint directory (default <out_dir>/<paradigm>)");
  eval_c->add_option("--out", out, "Output directory (default <ckpt>/eval)");
  eval_c->add_option("--solver", solver, "FM solver: euler or dopri5");
  eval_c->add_option("--steps", steps, "FM Euler steps");
  eval_c->add_option("--cfg-coef", cfg_coef, "Guidance coefficient");

  auto* bench_c = app.add_subcommand("bench", "Measure throughput and latency");
  bench_c->add_option("--ar", ar_ckpt, "AR checkpoint");
  bench_c->add_option("--fm", fm_ckpt, "FM checkpoint");
  bench_c->add_option("--out", out, "CSV path (default <out_dir>/bench.csv)");

  auto* sweep_c = app.add_subcommand("sweep", "Evaluate a grid of values for one config key");
  sweep_c->add_option("--key", key, "section.key to vary")->required();
  sweep_c->add_option("--values", values, "Comma-separated values")->required();
  sweep_c->add_option("--paradigm", paradigm_s, "ar or fm")->check(CLI::IsMember({"ar", "fm"}));
  sweep_c->add_option("--ckpt", ckpt, "Checkpoint for sampler keys (default <out_dir>/<paradigm>)");
  sweep_c->add_option("--data", data_dir, "Dataset for training keys (default <out_dir>/data)");
  sweep_c->add_option("--out", out, "Output directory (default <out_dir>/sweep)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config(io::read_file(config_path), config_path);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      ARFM_CHECK(eq != std::string::npos, ErrorKind::kConfig, "--set expects section.key=value, got '" + s + "'");
      set_option(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    const Paradigm paradigm = parse_paradigm(paradigm_s);
    const fs::path root = cfg.out_dir;
    const fs::path default_ckpt = root / to_string(paradigm);
    auto or_default = [](const std::string& v, const fs::path& d) { return v.empty() ? d : fs::path(v); };
    if (!solver.empty()) cfg.fm_sampler.solver = fm::parse_solver(solver);
    if (cfg_coef) cfg.ar_sampler.cfg_coef = cfg.fm_sampler.cfg_coef = *cfg_coef;
    if (!finetune.empty()) cfg.train.finetune = parse_finetune(finetune);
    if (steps) {
      if (train_c->parsed()) cfg.train.steps = *steps;
      else cfg.fm_sampler.n_steps = int(*steps);
    }
    validate(cfg);
    const pipeline::Logger log = [](const std::string& s) { std::cout << s << std::endl; };

    if (print->parsed()) {
      std::cout << print_config(cfg);
    } else if (gen->parsed()) {
      pipeline::gen_data(cfg, or_default(out, root / "data"), log);
    } else if (train_c->parsed()) {
      std::optional<fs::path> init_p;
      if (!init.empty()) init_p = init;
      pipeline::train_run(cfg, paradigm, or_default(data_dir, root / "data"), or_default(out, default_ckpt), init_p,
                          log);
    } else if (sample_c->parsed()) {
      const fs::path c = or_default(ckpt, default_ckpt);
      pipeline::sample_run(cfg, c, or_default(out, c / "samples"), n, log);
    } else if (inpaint_c->parsed()) {
      const fs::path c = or_default(ckpt, root / (mode == "fim" ? "ar" : "fm"));
      pipeline::inpaint_run(cfg, c, or_default(out, c / ("inpaint_" + mode)), pipeline::parse_inpaint_mode(mode), log);
    } else if (eval_c->parsed()) {
      const fs::path c = or_default(ckpt, default_ckpt);
      pipeline::eval_run(cfg, c, or_default(out, c / "eval"), log);
    } else if (bench_c->parsed()) {
      std::optional<fs::path> a, f;
      if (!ar_ckpt.empty()) a = ar_ckpt;
      if (!fm_ckpt.empty()) f = fm_ckpt;
      pipeline::bench_run(cfg, a, f, or_default(out, root / "bench.csv"), log);
    } else if (sweep_c->parsed()) {
      std::optional<fs::path> c, d;
      if (pipeline::is_sampler_key(key)) c = or_default(ckpt, default_ckpt);
      else d = or_default(data_dir, root / "data");
      pipeline::sweep_run(cfg, key, split_list(values), paradigm, c, d, or_default(out, root / "sweep"), log);
    }
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::bad_alloc&) {
    print_error("oom", "out of memory");
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
