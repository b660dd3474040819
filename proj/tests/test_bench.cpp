#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "arfm/bench.hpp"

using namespace arfm;
using namespace arfm::bench;
namespace fs = std::filesystem;

namespace {

Model tiny_model(Paradigm p) {
  ModelSpec spec;
  spec.paradigm = p;
  spec.shape = {2, 16, 2, 32, 4, 128};
  Model m(spec);
  m.init_params(1);
  return m;
}

}  // namespace

TEST(Bench, EvalCounts) {
  EXPECT_EQ(fm_evals_per_sample(50, 3.0), 100);
  EXPECT_EQ(fm_evals_per_sample(50, 1.0), 50);
  EXPECT_EQ(fm_evals_per_sample(10, 0.0), 10);
  EXPECT_EQ(ar_evals_per_sample(500, 4, 3.0), (500 + 3) * 2);
  EXPECT_EQ(ar_evals_per_sample(500, 4, 1.0), 503);
}

TEST(Bench, SecondsPerSampleFollowsWallTime) {
  const BenchRow r = make_row("ar", 4, 0, 0.5, 10, 7);
  EXPECT_DOUBLE_EQ(r.wall_s, 5.0);
  EXPECT_DOUBLE_EQ(r.s_per_sample, 0.125);
  EXPECT_DOUBLE_EQ(r.samples_per_s, 8.0);
  EXPECT_FALSE(r.failed());
  EXPECT_TRUE(failed_row("fm", 2, 10).failed());
}

TEST(Bench, MedianAndTiming) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), Error);
  int calls = 0;
  const double t = time_median(
      [&] {
        ++calls;
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      },
      2, 3);
  EXPECT_EQ(calls, 5);
  EXPECT_GE(t, 0.002);
}

TEST(Bench, CsvRoundTrip) {
  const fs::path p = fs::temp_directory_path() / "arfm_bench_test" / "bench.csv";
  const std::vector<BenchRow> rows = {make_row("ar", 1, 0, 0.123456789, 10, 1006), failed_row("fm", 8, 200),
                                      make_row("fm", 2, 25, 1.0 / 3.0, 10, 50)};
  write_csv(rows, p);
  EXPECT_EQ(read_csv(p), rows);
  EXPECT_THROW(write_csv({}, p), Error);
  write_plot_data(rows, p.parent_path() / "bench.dat");
  EXPECT_TRUE(fs::exists(p.parent_path() / "bench.dat"));
}

TEST(Bench, PlanValidation) {
  BenchPlan plan;
  EXPECT_NO_THROW(plan.validate());
  plan.batch_sizes = {4, 2};
  EXPECT_THROW(plan.validate(), Error);
  plan.batch_sizes = {1};
  plan.measured_iters = 0;
  EXPECT_THROW(plan.validate(), Error);
}

TEST(Bench, RunProducesOneRowPerConfiguration) {
  const World world{WorldSpec{}};
  const Model ar = tiny_model(Paradigm::kAr), fm = tiny_model(Paradigm::kFm);
  BenchPlan plan;
  plan.batch_sizes = {1, 2};
  plan.fm_step_counts = {2, 4};
  plan.warmup_iters = 0;
  plan.measured_iters = 1;
  plan.seconds = 0.1;
  int seen = 0;
  const auto rows = run_bench(plan, world, &ar, &fm, [&](const BenchRow&) { ++seen; });
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(seen, 6);
  for (const BenchRow& r : rows) {
    EXPECT_FALSE(r.failed());
    EXPECT_GT(r.samples_per_s, 0.0);
  }
  EXPECT_EQ(rows[0].paradigm, "ar");
  EXPECT_EQ(rows[0].model_evals, (5 + 3) * 2);
  EXPECT_EQ(rows[2].paradigm, "fm");
  EXPECT_EQ(rows[2].steps, 2);
  EXPECT_EQ(rows[5].model_evals, 8);
}

TEST(Bench, FailuresBecomeFailedRows) {
  const World world{WorldSpec{}};
  const Model ar = tiny_model(Paradigm::kAr);
  BenchPlan plan;
  plan.batch_sizes = {1};
  plan.warmup_iters = 0;
  plan.measured_iters = 1;
  plan.seconds = 4.0;  // 200 frames + 3 delay columns overflow max_len 128
  const auto rows = run_bench(plan, world, &ar, nullptr);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].failed());
}
