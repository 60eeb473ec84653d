#include "arimg/parallel_sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "arimg/errors.hpp"

namespace arimg {

void PipelineSpec::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("pipeline spec: " + what);
  };
  need(stages >= 1 && microbatches >= 1 && rounds >= 1, "stages, microbatches and rounds must be >= 1");
  need(t_f >= 0.0 && t_b >= 0.0 && latency >= 0.0 && prologue >= 0.0 && epilogue >= 0.0,
       "costs must be finite and >= 0");
  need(std::isfinite(t_f + t_b + latency + prologue + epilogue), "costs must be finite and >= 0");
  need(data_parallel >= 1, "data_parallel must be >= 1");
}

PipelineSpec PipelineSpec::full_scale() {
  PipelineSpec s;
  s.stages = 16;
  s.rounds = 4;
  return s;
}

namespace {

struct Node {
  int q = 0;  // chain position
  int m = 0;
  Dir dir = Dir::kForward;
  int dep = -1;
  bool scheduled = false;
  bool ready_known = false;
  double ready = 0.0;
  double start = 0.0, end = 0.0;
};

struct Graph {
  int S = 0, P = 0, M = 0;
  std::vector<Node> nodes;
  int id(Dir d, int q, int m) const { return ((d == Dir::kForward ? 0 : 1) * P + q) * M + m; }
  int device(int q) const { return q % S; }
};

Graph build_graph(const PipelineSpec& s) {
  Graph g;
  g.S = s.stages;
  g.P = s.stages * s.rounds;
  g.M = s.microbatches;
  g.nodes.resize(static_cast<std::size_t>(2 * g.P * g.M));
  for (int dir = 0; dir < 2; ++dir) {
    for (int q = 0; q < g.P; ++q) {
      for (int m = 0; m < g.M; ++m) {
        const Dir d = dir == 0 ? Dir::kForward : Dir::kBackward;
        Node& n = g.nodes[static_cast<std::size_t>(g.id(d, q, m))];
        n.q = q;
        n.m = m;
        n.dir = d;
        if (d == Dir::kForward) {
          n.dep = q > 0 ? g.id(Dir::kForward, q - 1, m) : -1;
        } else {
          n.dep = q == g.P - 1 ? g.id(Dir::kForward, q, m) : g.id(Dir::kBackward, q + 1, m);
        }
      }
    }
  }
  return g;
}

double transfer(const Graph& g, const PipelineSpec& s, const Node& from, const Node& to) {
  return g.device(from.q) == g.device(to.q) ? 0.0 : s.latency;
}

// Lexicographic priority: forward first, lower chunk, lower microbatch.
bool higher_priority(const Graph& g, const Node& a, const Node& b) {
  if (a.dir != b.dir) return a.dir == Dir::kForward;
  const int ca = a.q / g.S, cb = b.q / g.S;
  if (ca != cb) return ca < cb;
  return a.m < b.m;
}

}  // namespace

ScheduleTrace simulate_pipeline(const PipelineSpec& spec) {
  spec.validate();
  Graph g = build_graph(spec);
  const int S = g.S;
  std::vector<std::vector<int>> pending(static_cast<std::size_t>(S));
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    auto& n = g.nodes[i];
    pending[static_cast<std::size_t>(g.device(n.q))].push_back(static_cast<int>(i));
    if (n.dep < 0) {
      n.ready_known = true;
      n.ready = spec.prologue;
    }
  }
  const int fwd_per_device = spec.rounds * spec.microbatches;
  std::vector<int> fwd_done(static_cast<std::size_t>(S), 0);
  std::vector<double> busy(static_cast<std::size_t>(S), spec.prologue);
  std::size_t remaining = g.nodes.size();
  double t = spec.prologue;

  auto release = [&](const Node& done) {
    // Dependents of `done` (each node has at most one dependency).
    auto mark = [&](int id) {
      Node& n = g.nodes[static_cast<std::size_t>(id)];
      n.ready_known = true;
      n.ready = done.end + transfer(g, spec, done, n);
    };
    if (done.dir == Dir::kForward) {
      if (done.q + 1 < g.P) mark(g.id(Dir::kForward, done.q + 1, done.m));
      else mark(g.id(Dir::kBackward, done.q, done.m));
    } else if (done.q > 0) {
      mark(g.id(Dir::kBackward, done.q - 1, done.m));
    }
  };

  while (remaining > 0) {
    bool progress = false;
    for (int d = 0; d < S; ++d) {
      const auto du = static_cast<std::size_t>(d);
      if (busy[du] > t) continue;
      int best = -1;
      for (int id : pending[du]) {
        const Node& n = g.nodes[static_cast<std::size_t>(id)];
        if (!n.ready_known || n.ready > t) continue;
        if (n.dir == Dir::kBackward && fwd_done[du] < fwd_per_device) continue;
        if (best < 0 || higher_priority(g, n, g.nodes[static_cast<std::size_t>(best)])) best = id;
      }
      if (best < 0) continue;
      Node& n = g.nodes[static_cast<std::size_t>(best)];
      n.scheduled = true;
      n.start = t;
      n.end = t + (n.dir == Dir::kForward ? spec.t_f : spec.t_b);
      busy[du] = n.end;
      if (n.dir == Dir::kForward) ++fwd_done[du];
      auto& pd = pending[du];
      pd.erase(std::find(pd.begin(), pd.end(), best));
      release(n);
      --remaining;
      progress = true;
    }
    if (progress) continue;
    double next = std::numeric_limits<double>::infinity();
    for (int d = 0; d < S; ++d) {
      const auto du = static_cast<std::size_t>(d);
      if (busy[du] > t) next = std::min(next, busy[du]);
      for (int id : pending[du]) {
        const Node& n = g.nodes[static_cast<std::size_t>(id)];
        if (n.ready_known && n.ready > t) next = std::min(next, n.ready);
      }
    }
    if (!std::isfinite(next)) throw ContractError("simulate_pipeline: schedule deadlocked");
    t = next;
  }

  ScheduleTrace tr;
  tr.stages = S;
  tr.prologue = spec.prologue;
  tr.epilogue = spec.epilogue;
  tr.data_parallel = spec.data_parallel;
  tr.devices.resize(static_cast<std::size_t>(S));
  double last = spec.prologue;
  for (const auto& n : g.nodes) {
    tr.devices[static_cast<std::size_t>(g.device(n.q))].push_back(
        {g.device(n.q), n.q / S, n.m, n.dir, n.start, n.end});
    last = std::max(last, n.end);
  }
  for (auto& dev : tr.devices) {
    std::stable_sort(dev.begin(), dev.end(), [](const PipeTask& a, const PipeTask& b) {
      return a.start != b.start ? a.start < b.start : a.end < b.end;
    });
  }
  tr.makespan = last + spec.epilogue;
  return tr;
}

double bubble_ratio(const ScheduleTrace& trace) {
  std::size_t tasks = 0;
  double busy = 0.0;
  for (const auto& dev : trace.devices) {
    tasks += dev.size();
    for (const auto& t : dev) busy += t.end - t.start;
  }
  if (trace.stages < 1 || tasks == 0) throw ContractError("bubble_ratio: empty trace");
  const double S = trace.stages;
  busy += S * (trace.prologue + trace.epilogue);
  const double total = S * trace.makespan;
  if (total == 0.0) return 0.0;
  return std::clamp((total - busy) / total, 0.0, 1.0);
}

double throughput(const ScheduleTrace& trace, int microbatches) {
  if (trace.makespan <= 0.0) throw ContractError("throughput: zero makespan");
  return static_cast<double>(trace.data_parallel) * microbatches / trace.makespan;
}

void check_trace(const PipelineSpec& spec, const ScheduleTrace& trace) {
  spec.validate();
  const Graph g = build_graph(spec);
  auto fail = [](const std::string& why) { throw ContractError("trace: " + why); };
  if (trace.stages != spec.stages || trace.devices.size() != static_cast<std::size_t>(spec.stages)) {
    fail("device count differs from the spec");
  }
  std::vector<const PipeTask*> seen(g.nodes.size(), nullptr);
  double last = spec.prologue;
  for (std::size_t d = 0; d < trace.devices.size(); ++d) {
    const auto& dev = trace.devices[d];
    for (std::size_t i = 0; i < dev.size(); ++i) {
      const auto& t = dev[i];
      const int q = t.chunk * spec.stages + t.stage;
      if (t.stage != static_cast<int>(d) || t.chunk < 0 || t.chunk >= spec.rounds || t.microbatch < 0 ||
          t.microbatch >= spec.microbatches) {
        fail("task out of range on device " + std::to_string(d));
      }
      const auto id = static_cast<std::size_t>(g.id(t.dir, q, t.microbatch));
      if (seen[id] != nullptr) fail("duplicate task");
      seen[id] = &t;
      const double dur = t.dir == Dir::kForward ? spec.t_f : spec.t_b;
      if (t.end - t.start != dur) fail("task duration differs from its cost");
      if (t.start < spec.prologue) fail("task starts inside the prologue");
      if (i > 0 && t.start < dev[i - 1].end) fail("overlapping tasks on device " + std::to_string(d));
      last = std::max(last, t.end);
    }
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (seen[i] == nullptr) fail("missing task");
    const Node& n = g.nodes[i];
    if (n.dep < 0) continue;
    const Node& dn = g.nodes[static_cast<std::size_t>(n.dep)];
    const PipeTask* dep = seen[static_cast<std::size_t>(n.dep)];
    if (dep == nullptr) fail("missing task");
    if (seen[i]->start < dep->end + transfer(g, spec, dn, n)) fail("dependency violated");
  }
  if (trace.makespan < last + spec.epilogue) fail("makespan shorter than the last task");
}

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string trace_json(const ScheduleTrace& trace) {
  nlohmann::json devices = nlohmann::json::array();
  for (const auto& dev : trace.devices) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : dev) {
      tasks.push_back({{"stage", t.stage},
                       {"chunk", t.chunk},
                       {"microbatch", t.microbatch},
                       {"dir", t.dir == Dir::kForward ? "fwd" : "bwd"},
                       {"start", t.start},
                       {"end", t.end}});
    }
    devices.push_back({{"tasks", std::move(tasks)}});
  }
  nlohmann::json j{{"devices", std::move(devices)}, {"makespan", trace.makespan}};
  return j.dump();
}

std::string sweep_csv(const std::vector<PipelineSpec>& specs) {
  std::string out = "stages,microbatches,rounds,t_f,t_b,latency,makespan,bubble_ratio,throughput\n";
  for (const auto& s : specs) {
    const auto tr = simulate_pipeline(s);
    out += std::to_string(s.stages) + "," + std::to_string(s.microbatches) + "," + std::to_string(s.rounds) + "," +
           num(s.t_f) + "," + num(s.t_b) + "," + num(s.latency) + "," + num(tr.makespan) + "," +
           num(bubble_ratio(tr)) + "," + (tr.makespan > 0.0 ? num(throughput(tr, s.microbatches)) : "inf") + "\n";
  }
  return out;
}

const char* strategy_name(ShardStrategy s) {
  return s == ShardStrategy::kAllReduce ? "allreduce" : "reducescatter_allgather";
}

ShardStrategy strategy_from_name(const std::string& name) {
  if (name == "allreduce") return ShardStrategy::kAllReduce;
  if (name == "reducescatter_allgather" || name == "rs-ag") return ShardStrategy::kReduceScatterAllGather;
  throw ContractError("shard strategy: unknown '" + name + "' (allreduce | reducescatter_allgather)");
}

void ShardSpec::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("shard spec: " + what);
  };
  need(n_way >= 1, "n_way must be >= 1");
  need(batch >= 1 && seq >= 1 && d_model >= 1 && d_mlp >= 1 && heads >= 1, "dimensions must be >= 1");
  need(element_size >= 1, "element_size must be >= 1");
  need(d_mlp % n_way == 0, "n_way " + std::to_string(n_way) + " does not divide d_mlp " + std::to_string(d_mlp));
  need(heads % n_way == 0, "n_way " + std::to_string(n_way) + " does not divide heads " + std::to_string(heads));
  need(d_model % n_way == 0, "n_way " + std::to_string(n_way) + " does not divide d_model " + std::to_string(d_model));
}

ShardCost shard_cost(const ShardSpec& s) {
  s.validate();
  const std::int64_t n = s.n_way;
  const std::int64_t out = s.batch * s.seq * s.d_model;
  const std::int64_t hidden = s.batch * s.seq * (s.d_mlp / n);
  ShardCost c;
  // Ring collectives: allreduce moves 2(n-1)/n of the output; reduce-scatter
  // of the output plus all-gather of the input move (n-1)/n each.
  c.comm_bytes_per_layer = 2.0 * static_cast<double>(n - 1) * static_cast<double>(out) * s.element_size /
                           static_cast<double>(n);
  if (s.strategy == ShardStrategy::kAllReduce) {
    c.peak_output_elems = out;
    c.peak_activation_elems = out + hidden + out;  // replicated input, hidden shard, full output
  } else {
    c.peak_output_elems = out / n;
    c.peak_activation_elems = out + hidden + out / n;  // gathered input, hidden shard, output shard
  }
  return c;
}

}  // namespace arimg
