#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arfm/pipeline.hpp"

using namespace arfm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "arfm_test_cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunConfig tiny_config(const fs::path& root) {
  RunConfig c;
  c.out_dir = root.string();
  c.model = {2, 16, 2, 32, 4, 128};
  c.data.n_samples = 6;
  c.data.norm_segments = 8;
  c.data.seconds = 1.0;
  c.train.batch_size = 2;
  c.train.segment_seconds = 0.5;
  c.train.steps = 3;
  c.train.warmup = 1;
  c.train.lr = 1e-3;
  c.eval.n_samples = 3;
  c.eval.seconds = 0.5;
  c.eval.batch = 2;
  c.fm_sampler.n_steps = 3;
  return c;
}

struct CmdResult {
  int code = 0;
  std::string out;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(ARFM_CLI_PATH) + " " + args + " 2>&1";
  CmdResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, PrintParseRoundTrip) {
  RunConfig c;
  set_option(c, "train.lr", "0.003");
  set_option(c, "ar_sampler.top_k", "250");
  set_option(c, "bench.batch_sizes", "1, 4, 16");
  set_option(c, "fm_sampler.solver", "dopri5");
  set_option(c, "world.noise_std", "0.1");
  const std::string text = print_config(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(print_config(back), text);
  EXPECT_EQ(back.train.lr, 0.003);
  EXPECT_EQ(back.ar_sampler.top_k, 250);
  EXPECT_EQ(back.bench.batch_sizes, (std::vector<int>{1, 4, 16}));
  EXPECT_EQ(back.fm_sampler.solver, fm::Solver::kDopri5);
  EXPECT_EQ(back.world.noise_std, 0.1f);
  EXPECT_EQ(get_option(back, "ar_sampler.top_p"), "none");
}

TEST(Config, DefaultsFollowTheTrainingRecipe) {
  const RunConfig c;
  EXPECT_EQ(c.train.batch_size, 32);
  EXPECT_EQ(c.train.segment_seconds, 10.0);
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.p_drop, 0.5);
  EXPECT_EQ(c.train.p_all, 0.1);
  EXPECT_EQ(c.fm_sampler.n_steps, 50);
  EXPECT_EQ(c.world.frame_rate, 50.0);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, RejectsUnknownAndMalformedInput) {
  RunConfig c;
  EXPECT_THROW(set_option(c, "train.nope", "1"), Error);
  EXPECT_THROW(set_option(c, "train", "1"), Error);
  EXPECT_THROW(set_option(c, "train.lr", "abc"), Error);
  EXPECT_THROW(parse_config("[nosuch]\nx = 1\n"), Error);
  EXPECT_THROW(parse_config("lr = 1\n"), Error);
  EXPECT_THROW(parse_config("[train]\nlr\n"), Error);
  EXPECT_NO_THROW(parse_config("# comment\n[train]\nlr = 0.5  # trailing\n"));
  set_option(c, "ar_sampler.top_k", "5");
  set_option(c, "ar_sampler.top_p", "0.9");
  EXPECT_THROW(validate(c), Error);
  RunConfig d;
  set_option(d, "model.n_blocks", "3");
  EXPECT_THROW(validate(d), Error);
}

TEST(Pipeline, DataTrainEvalSampleInpaint) {
  const fs::path root = scratch("pipeline");
  const RunConfig cfg = tiny_config(root);
  const io::DatasetInfo info = pipeline::gen_data(cfg, root / "data");
  EXPECT_EQ(info.count, 6u);
  const auto data = io::load_dataset(root / "data", io::read_dataset_info(root / "data"));
  ASSERT_EQ(data.size(), 6u);
  EXPECT_EQ(data[0].tokens.length(), 50u);

  for (Paradigm p : {Paradigm::kAr, Paradigm::kFm}) {
    const fs::path ck = root / to_string(p);
    const Model m = pipeline::train_run(cfg, p, root / "data", ck, std::nullopt);
    const Model back = io::load_checkpoint(ck);
    EXPECT_EQ(back.params, m.params);
    EXPECT_TRUE(fs::exists(ck / "loss.csv"));
    const metrics::MetricSummary s = pipeline::eval_run(cfg, ck, ck / "eval");
    EXPECT_EQ(s.n, 3u);
    EXPECT_TRUE(fs::exists(ck / "eval" / "metrics.csv"));
    pipeline::sample_run(cfg, ck, ck / "samples", 2);
    EXPECT_TRUE(fs::exists(ck / "samples" / pipeline::sample_name("latent", 1)));
  }
  EXPECT_TRUE(fs::exists(root / "fm" / "samples" / "trace.csv"));
  for (auto mode : {pipeline::InpaintMode::kFim, pipeline::InpaintMode::kZeroShot, pipeline::InpaintMode::kSupervised}) {
    const fs::path ck = root / (mode == pipeline::InpaintMode::kFim ? "ar" : "fm");
    const metrics::MetricSummary s = pipeline::inpaint_run(cfg, ck, root / "inpaint", mode);
    EXPECT_EQ(s.n, 3u);
  }
  // Fine-tuning needs a starting checkpoint.
  RunConfig ft = cfg;
  ft.train.finetune = Finetune::kFim;
  EXPECT_THROW(pipeline::train_run(ft, Paradigm::kAr, root / "data", root / "ft", std::nullopt), Error);
  EXPECT_NO_THROW(pipeline::train_run(ft, Paradigm::kAr, root / "data", root / "ft", root / "ar"));
}

TEST(Pipeline, TrainingIsDeterministic) {
  const fs::path root = scratch("determinism");
  RunConfig cfg = tiny_config(root);
  pipeline::gen_data(cfg, root / "data");
  for (Paradigm p : {Paradigm::kAr, Paradigm::kFm}) {
    const Model a = pipeline::train_run(cfg, p, root / "data", root / "a", std::nullopt);
    const Model b = pipeline::train_run(cfg, p, root / "data", root / "b", std::nullopt);
    EXPECT_EQ(a.params, b.params);
    cfg.seed = 2;
    const Model c = pipeline::train_run(cfg, p, root / "data", root / "c", std::nullopt);
    EXPECT_NE(a.params, c.params);
    cfg.seed = 1;
  }
}

TEST(Cli, PrintConfigRoundTripsThroughConfigFile) {
  const fs::path root = scratch("cli_config");
  const CmdResult a = run_cli("print-config --set train.lr=0.002 --set eval.n_samples=7");
  ASSERT_EQ(a.code, 0) << a.out;
  io::write_file(root / "run.cfg", a.out);
  const CmdResult b = run_cli("--config " + (root / "run.cfg").string() + " print-config");
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("lr = 0.002"), std::string::npos);
}

TEST(Cli, ErrorsAreStructured) {
  const CmdResult a = run_cli("print-config --set train.bogus=1");
  EXPECT_EQ(a.code, 1);
  EXPECT_NE(a.out.find("error: code=config"), std::string::npos) << a.out;
  const CmdResult b = run_cli("train --paradigm xx");
  EXPECT_EQ(b.code, 2);
  EXPECT_NE(b.out.find("error: code=usage"), std::string::npos) << b.out;
  const CmdResult c = run_cli("eval --ckpt /nonexistent/ckpt");
  EXPECT_EQ(c.code, 1);
  EXPECT_NE(c.out.find("error: code="), std::string::npos) << c.out;
}

TEST(Cli, GenTrainBenchSweep) {
  const fs::path root = scratch("cli_run");
  const std::string sets = "--set run.out_dir=" + root.string() +
                           " --set model.model_dim=16 --set model.ff_dim=32 --set model.max_len=128"
                           " --set data.n_samples=4 --set data.norm_segments=4 --set data.seconds=1"
                           " --set train.batch_size=2 --set train.segment_seconds=0.5 --set train.warmup=1"
                           " --set eval.n_samples=2 --set eval.seconds=0.5 --set fm_sampler.n_steps=2"
                           " --set bench.batch_sizes=1,2 --set bench.fm_steps=2 --set bench.seconds=0.2"
                           " --set bench.warmup_iters=0 --set bench.measured_iters=1";
  ASSERT_EQ(run_cli(sets + " gen-data").code, 0);
  ASSERT_EQ(run_cli(sets + " train --paradigm ar --steps 2").code, 0);
  ASSERT_EQ(run_cli(sets + " train --paradigm fm --steps 2").code, 0);
  const CmdResult b = run_cli(sets + " bench --ar " + (root / "ar").string() + " --fm " + (root / "fm").string());
  ASSERT_EQ(b.code, 0) << b.out;
  const auto rows = bench::read_csv(root / "bench.csv");
  EXPECT_EQ(rows.size(), 4u);
  const CmdResult s = run_cli(sets + " sweep --paradigm fm --key fm_sampler.n_steps --values 1,2");
  ASSERT_EQ(s.code, 0) << s.out;
  const std::string csv = slurp(root / "sweep" / "sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "key,value,n,chord_iou,beat_f1,melody_sim");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
