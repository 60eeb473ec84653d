#include <gtest/gtest.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "arimg/errors.hpp"
#include "arimg/parallel_sim.hpp"

using namespace arimg;

namespace {

PipelineSpec uniform(int S, int M, int R = 1) {
  PipelineSpec s;
  s.stages = S;
  s.microbatches = M;
  s.rounds = R;
  return s;
}

// Independent R=1 oracle: every stage runs F0..F(M-1) then B0..B(M-1) in that
// fixed order, each task starting as soon as both the device and its input
// are free. No ready queue, no shared code with the simulator.
double fill_drain_makespan(int S, int M, double tf, double tb, double lat) {
  std::vector<std::vector<double>> fe(S, std::vector<double>(M)), be(S, std::vector<double>(M));
  std::vector<double> free_at(S, 0.0);
  for (int s = 0; s < S; ++s) {
    for (int m = 0; m < M; ++m) {
      const double in = s == 0 ? 0.0 : fe[s - 1][m] + lat;
      const double st = std::max(free_at[s], in);
      fe[s][m] = st + tf;
      free_at[s] = fe[s][m];
    }
  }
  // backward of microbatch m needs the stage above; sweep m outer, stage down
  std::vector<double> bfree = free_at;
  for (int m = 0; m < M; ++m) {
    for (int s = S - 1; s >= 0; --s) {
      const double in = s == S - 1 ? fe[s][m] : be[s + 1][m] + lat;
      const double st = std::max(bfree[s], in);
      be[s][m] = st + tb;
      bfree[s] = be[s][m];
    }
  }
  double mk = 0.0;
  for (int s = 0; s < S; ++s) mk = std::max(mk, bfree[s]);
  return mk;
}

}  // namespace

TEST(Pipeline, TwoStagesTwoMicrobatchesTakesSix) {
  const auto tr = simulate_pipeline(uniform(2, 2));
  EXPECT_EQ(tr.makespan, 6.0);
  EXPECT_EQ(fill_drain_makespan(2, 2, 1, 1, 0), 6.0);
}

TEST(Pipeline, SingleStageHasNoBubble) {
  for (int M : {1, 3, 8}) {
    const auto tr = simulate_pipeline(uniform(1, M));
    EXPECT_EQ(bubble_ratio(tr), 0.0);
    EXPECT_EQ(tr.makespan, 2.0 * M);
  }
}

TEST(Pipeline, ClosedFormBubbleForAllSmallConfigs) {
  for (int S = 1; S <= 8; ++S) {
    for (int M = 1; M <= 16; ++M) {
      const auto tr = simulate_pipeline(uniform(S, M));
      const double want = static_cast<double>(S - 1) / (M + S - 1);
      EXPECT_EQ(bubble_ratio(tr), want) << "S=" << S << " M=" << M;
      EXPECT_EQ(tr.makespan, fill_drain_makespan(S, M, 1, 1, 0)) << "S=" << S << " M=" << M;
    }
  }
}

TEST(Pipeline, FourStagesEightMicrobatches) {
  EXPECT_DOUBLE_EQ(bubble_ratio(simulate_pipeline(uniform(4, 8))), 3.0 / 11.0);
}

TEST(Pipeline, MatchesOracleWithLatencyAndUnevenCosts) {
  for (int S : {2, 3, 5}) {
    for (int M : {1, 4, 7}) {
      auto s = uniform(S, M);
      s.t_f = 1.5;
      s.t_b = 2.25;
      s.latency = 0.5;
      EXPECT_DOUBLE_EQ(simulate_pipeline(s).makespan, fill_drain_makespan(S, M, 1.5, 2.25, 0.5));
    }
  }
}

TEST(Pipeline, BubbleNeverGrowsWithMoreMicrobatches) {
  double prev = 1.0;
  for (int M = 1; M <= 32; ++M) {
    const double b = bubble_ratio(simulate_pipeline(uniform(4, M)));
    EXPECT_LE(b, prev) << "M=" << M;
    prev = b;
  }
}

// With R > 1 a partial group of microbatches (M not a multiple of S) costs an
// extra circuit, so the sweep only steps through whole groups.
TEST(Pipeline, CircularBubbleShrinksOverWholeGroups) {
  for (int R : {2, 4}) {
    double prev = 1.0;
    for (int M = 4; M <= 32; M += 4) {
      const double b = bubble_ratio(simulate_pipeline(uniform(4, M, R)));
      EXPECT_LE(b, prev + 1e-12) << "R=" << R << " M=" << M;
      prev = b;
    }
  }
}

TEST(Pipeline, CircularScheduleShrinksBubbleAtPreset) {
  auto p = PipelineSpec::full_scale();
  EXPECT_EQ(p.stages, 16);
  EXPECT_EQ(p.rounds, 4);
  p.microbatches = 8;
  auto r1 = p;
  r1.rounds = 1;
  // Same total work per microbatch: each of the R chunks costs 1/R.
  p.t_f = p.t_b = 1.0 / p.rounds;
  const double b4 = bubble_ratio(simulate_pipeline(p));
  const double b1 = bubble_ratio(simulate_pipeline(r1));
  EXPECT_LT(b4, b1);
  EXPECT_DOUBLE_EQ(b1, 15.0 / 23.0);
}

TEST(Pipeline, CircularNeverWorseOnUniformCosts) {
  for (int S : {2, 4, 8}) {
    for (int M = 1; M <= 16; ++M) {
      const double b1 = bubble_ratio(simulate_pipeline(uniform(S, M, 1)));
      for (int R : {2, 4}) {
        auto s = uniform(S, M, R);
        s.t_f = s.t_b = 1.0 / R;
        EXPECT_LE(bubble_ratio(simulate_pipeline(s)), b1 + 1e-12) << S << " " << M << " " << R;
      }
    }
  }
}

TEST(Pipeline, TracesAreValidAndReplayable) {
  for (int R : {1, 2, 4}) {
    auto s = uniform(4, 6, R);
    s.latency = 0.25;
    s.prologue = 1.0;
    s.epilogue = 0.5;
    const auto a = simulate_pipeline(s);
    EXPECT_NO_THROW(check_trace(s, a));
    EXPECT_EQ(trace_json(a), trace_json(simulate_pipeline(s)));
    // lower bounds: busiest device and the critical path of one microbatch
    const double work = R * s.microbatches * (s.t_f + s.t_b);
    const double path = R * s.stages * (s.t_f + s.t_b) + 2.0 * (R * s.stages - 1) * s.latency;
    EXPECT_GE(a.makespan, s.prologue + s.epilogue + std::max(work, path));
  }
}

TEST(Pipeline, RTasksStayOnTheirStage) {
  const auto tr = simulate_pipeline(uniform(3, 2, 2));
  ASSERT_EQ(tr.devices.size(), 3u);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(tr.devices[d].size(), 2u * 2u * 2u);
    for (const auto& t : tr.devices[d]) EXPECT_EQ(t.stage, static_cast<int>(d));
  }
}

TEST(Pipeline, FillDrainOrderOnEachDevice) {
  const auto tr = simulate_pipeline(uniform(3, 4));
  for (const auto& dev : tr.devices) {
    for (int m = 0; m < 4; ++m) {
      EXPECT_EQ(dev[m].dir, Dir::kForward);
      EXPECT_EQ(dev[m].microbatch, m);
      EXPECT_EQ(dev[4 + m].dir, Dir::kBackward);
      EXPECT_EQ(dev[4 + m].microbatch, m);
    }
  }
}

TEST(Pipeline, CheckTraceCatchesViolations) {
  const auto s = uniform(3, 3);
  const auto good = simulate_pipeline(s);

  auto overlap = good;
  overlap.devices[1][1].start -= 0.5;
  overlap.devices[1][1].end -= 0.5;
  EXPECT_THROW(check_trace(s, overlap), ContractError);

  auto missing = good;
  missing.devices[2].pop_back();
  EXPECT_THROW(check_trace(s, missing), ContractError);

  auto early = good;  // first backward on the last stage before its forward
  auto& dev = early.devices[2];
  auto it = std::find_if(dev.begin(), dev.end(), [](const PipeTask& t) { return t.dir == Dir::kBackward; });
  it->start = 0.0;
  it->end = 1.0;
  EXPECT_THROW(check_trace(s, early), ContractError);

  auto lat = s;  // same trace with latency is infeasible
  lat.latency = 1.0;
  EXPECT_THROW(check_trace(lat, good), ContractError);
}

TEST(Pipeline, PrologueAndEpilogueCountAsBusy) {
  auto s = uniform(1, 2);
  s.prologue = 3.0;
  s.epilogue = 1.0;
  const auto tr = simulate_pipeline(s);
  EXPECT_EQ(tr.makespan, 8.0);
  EXPECT_EQ(bubble_ratio(tr), 0.0);
  EXPECT_EQ(tr.devices[0].front().start, 3.0);
}

TEST(Pipeline, ThroughputScalesWithDataParallel) {
  auto s = uniform(2, 2);
  s.data_parallel = 64;
  const auto tr = simulate_pipeline(s);
  EXPECT_DOUBLE_EQ(throughput(tr, 2), 64.0 * 2.0 / 6.0);
  EXPECT_EQ(bubble_ratio(tr), bubble_ratio(simulate_pipeline(uniform(2, 2))));
}

TEST(Pipeline, RejectsBadSpecsAndEmptyTraces) {
  EXPECT_THROW(simulate_pipeline(uniform(0, 1)), ContractError);
  EXPECT_THROW(simulate_pipeline(uniform(1, 0)), ContractError);
  EXPECT_THROW(simulate_pipeline(uniform(1, 1, 0)), ContractError);
  auto neg = uniform(2, 2);
  neg.latency = -1.0;
  EXPECT_THROW(simulate_pipeline(neg), ContractError);
  EXPECT_THROW(bubble_ratio(ScheduleTrace{}), ContractError);
}

TEST(Pipeline, JsonExportShape) {
  const auto tr = simulate_pipeline(uniform(2, 1));
  const auto j = nlohmann::json::parse(trace_json(tr));
  EXPECT_EQ(j.at("makespan").get<double>(), tr.makespan);
  ASSERT_EQ(j.at("devices").size(), 2u);
  const auto& t0 = j["devices"][0]["tasks"][0];
  for (const char* k : {"stage", "chunk", "microbatch", "dir", "start", "end"}) EXPECT_TRUE(t0.contains(k)) << k;
  EXPECT_EQ(t0["dir"], "fwd");
}

TEST(Pipeline, SweepCsvOneRowPerSpec) {
  const auto csv = sweep_csv({uniform(4, 8), uniform(2, 2)});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("4,8,1,1,1,0,22,0.2727"), std::string::npos);
}

TEST(Shard, SingleDeviceHasNoCommunication) {
  ShardSpec s;
  s.n_way = 1;
  const auto c = shard_cost(s);
  EXPECT_EQ(c.comm_bytes_per_layer, 0.0);
  EXPECT_EQ(c.peak_output_elems, s.batch * s.seq * s.d_model);
}

TEST(Shard, ReduceScatterQuartersPeakOutput) {
  ShardSpec a;
  a.n_way = 4;
  ShardSpec b = a;
  b.strategy = ShardStrategy::kReduceScatterAllGather;
  const auto ca = shard_cost(a), cb = shard_cost(b);
  EXPECT_EQ(cb.peak_output_elems * 4, ca.peak_output_elems);
  EXPECT_EQ(ca.comm_bytes_per_layer, cb.comm_bytes_per_layer);
  EXPECT_LT(cb.peak_activation_elems, ca.peak_activation_elems);
  // 2 * 3/4 * 8*1024*1024 elements * 2 bytes
  EXPECT_EQ(ca.comm_bytes_per_layer, 2.0 * 3.0 / 4.0 * 8 * 1024 * 1024 * 2);
}

TEST(Shard, DivisibilityEnforced) {
  ShardSpec s;
  s.n_way = 3;
  EXPECT_THROW(shard_cost(s), ContractError);
  s.n_way = 32;  // divides d_mlp but not heads
  EXPECT_THROW(shard_cost(s), ContractError);
}

TEST(Shard, StrategyNamesRoundTrip) {
  for (auto st : {ShardStrategy::kAllReduce, ShardStrategy::kReduceScatterAllGather}) {
    EXPECT_EQ(strategy_from_name(strategy_name(st)), st);
  }
  EXPECT_THROW(strategy_from_name("ring"), ContractError);
}
