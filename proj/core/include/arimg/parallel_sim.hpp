#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace arimg {

struct PipelineSpec {
  int stages = 16;  // S, one device per stage
  int microbatches = 8;  // M
  int rounds = 1;  // R chunks per stage; > 1 is the circular schedule
  double t_f = 1.0;  // per chunk
  double t_b = 1.0;
  double latency = 0.0;  // transfer between different devices
  // Data-parallel work outside the pipelined stack, run on every device.
  double prologue = 0.0;
  double epilogue = 0.0;
  int data_parallel = 1;  // throughput multiplier only
  void validate() const;

  // 16 stages, 4-round circular schedule.
  static PipelineSpec full_scale();
};

enum class Dir { kForward, kBackward };

struct PipeTask {
  int stage = 0;  // device
  int chunk = 0;  // round r; chain position is chunk * S + stage
  int microbatch = 0;
  Dir dir = Dir::kForward;
  double start = 0.0;
  double end = 0.0;
};

struct ScheduleTrace {
  int stages = 0;
  std::vector<std::vector<PipeTask>> devices;  // per device, by start time
  double prologue = 0.0;
  double epilogue = 0.0;
  double makespan = 0.0;  // includes prologue and epilogue
  int data_parallel = 1;
};

// List scheduling over the forward/backward dependency chain. A device runs
// all of its forward tasks before any backward task (fill-drain; with R > 1
// the chunks are visited circularly). Among ready tasks a device picks
// forward first, then lower chunk, then lower microbatch. Deterministic.
ScheduleTrace simulate_pipeline(const PipelineSpec& spec);

// (S * makespan - busy time) / (S * makespan); prologue/epilogue count as
// busy on every device. ContractError on an empty trace.
double bubble_ratio(const ScheduleTrace& trace);

// Microbatches per time unit across data-parallel replicas.
double throughput(const ScheduleTrace& trace, int microbatches);

// Throws ContractError naming the first violation: overlapping tasks on a
// device, a missing or duplicated task, or a dependency started before its
// input (plus latency across devices) was available.
void check_trace(const PipelineSpec& spec, const ScheduleTrace& trace);

std::string trace_json(const ScheduleTrace& trace);
std::string sweep_csv(const std::vector<PipelineSpec>& specs);

enum class ShardStrategy { kAllReduce, kReduceScatterAllGather };
const char* strategy_name(ShardStrategy s);
ShardStrategy strategy_from_name(const std::string& name);

struct ShardSpec {
  int n_way = 4;
  std::int64_t batch = 8;
  std::int64_t seq = 1024;
  std::int64_t d_model = 1024;
  std::int64_t d_mlp = 4096;
  std::int64_t heads = 16;
  ShardStrategy strategy = ShardStrategy::kAllReduce;
  int element_size = 2;  // bytes
  void validate() const;
};

// One feed-forward layer with weights split on d_mlp, per device.
struct ShardCost {
  double comm_bytes_per_layer = 0.0;
  std::int64_t peak_output_elems = 0;  // layer output held per device
  std::int64_t peak_activation_elems = 0;  // input + hidden + output at the peak
};

ShardCost shard_cost(const ShardSpec& spec);

}  // namespace arimg
