#pragma once

// Task graphs: kernel launches over declared buffers, the hazards between
// them, and the residency simulation that turns a task->device mapping into
// the minimal set of buffer copies.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hetflow/buffer.hpp"
#include "hetflow/device.hpp"
#include "hetflow/error.hpp"
#include "hetflow/hash.hpp"
#include "hetflow/kernel.hpp"

namespace hetflow {

/// A task runs only if element `element` (f32) of `buffer` is nonzero, or
/// zero when `run_if_nonzero` is false. The guard buffer must be in the
/// task's read set and every write must also be a read, so a skipped task
/// leaves its outputs holding the (already resident) previous version.
struct Guard {
  BufferId buffer;
  std::size_t element = 0;
  bool run_if_nonzero = false;
  friend bool operator==(const Guard&, const Guard&) = default;
};

struct TaskMeta {
  std::optional<DeviceId> device_hint;
  bool profile = false;
  std::string stage;
};

struct Task {
  std::string kernel;
  std::vector<BufferId> reads;
  std::vector<BufferId> writes;
  IndexSpace space;
  std::vector<double> params;
  TaskMeta meta;
  std::optional<Guard> guard;

  bool reads_buffer(BufferId b) const { return std::find(reads.begin(), reads.end(), b) != reads.end(); }
  bool writes_buffer(BufferId b) const { return std::find(writes.begin(), writes.end(), b) != writes.end(); }
};

enum class Hazard { raw, waw, war };

inline const char* to_string(Hazard h) {
  switch (h) {
    case Hazard::raw: return "RAW";
    case Hazard::waw: return "WAW";
    case Hazard::war: return "WAR";
  }
  return "?";
}

/// One ordering constraint from -> to caused by `buffer`. When several
/// hazards join the same pair on the same buffer the strongest is kept
/// (RAW over WAW over WAR).
struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  BufferId buffer;
  Hazard hazard = Hazard::raw;
  friend bool operator==(const Edge&, const Edge&) = default;
};

class TaskGraph {
 public:
  TaskGraph(const BufferTable& buffers, const KernelRegistry& registry) : buffers_(&buffers), registry_(&registry) {}

  /// Validates and appends; edges are stale until infer_dependencies().
  std::size_t add_task(Task task) {
    const KernelEntry* k = registry_->find(task.kernel);
    if (!k) fail(ErrorCode::unknown_kernel, "'" + task.kernel + "'");
    const auto& c = k->contract;
    require(task.reads.size() == c.reads && task.writes.size() == c.writes && task.params.size() == c.params,
            ErrorCode::contract_violation,
            "task arity does not match kernel '" + task.kernel + "' (reads " + std::to_string(c.reads) + ", writes " +
                std::to_string(c.writes) + ", params " + std::to_string(c.params) + ")");
    require(task.space.valid() && task.space.size() > 0, ErrorCode::invalid_argument,
            "index space extents must be >= 1 for '" + task.kernel + "'");
    auto check_unique = [&](const std::vector<BufferId>& ids, const char* what) {
      std::set<BufferId> seen;
      for (BufferId b : ids) {
        require(buffers_->contains(b), ErrorCode::unknown_buffer,
                "task '" + task.kernel + "' references undeclared buffer " + std::to_string(b.value));
        require(seen.insert(b).second, ErrorCode::invalid_argument,
                std::string("buffer listed twice in ") + what + " of '" + task.kernel + "'");
      }
    };
    check_unique(task.reads, "reads");
    check_unique(task.writes, "writes");
    if (task.guard) {
      const Guard& g = *task.guard;
      require(task.reads_buffer(g.buffer), ErrorCode::contract_violation, "guard buffer must be read by its task");
      const BufferDesc& d = buffers_->at(g.buffer);
      require(d.element == ElementType::f32 && g.element < d.count(), ErrorCode::invalid_argument,
              "guard must address an f32 element in range");
      for (BufferId w : task.writes)
        require(task.reads_buffer(w), ErrorCode::contract_violation,
                "guarded task '" + task.kernel + "' must read every buffer it writes");
    }
    tasks_.push_back(std::move(task));
    inferred_ = false;
    edges_.clear();
    return tasks_.size() - 1;
  }

  /// Buffers synchronised back to the host after the graph runs.
  void add_output(BufferId b) {
    require(buffers_->contains(b), ErrorCode::unknown_buffer, "output buffer " + std::to_string(b.value));
    if (std::find(outputs_.begin(), outputs_.end(), b) == outputs_.end()) outputs_.push_back(b);
  }
  const std::vector<BufferId>& outputs() const { return outputs_; }

  const std::vector<Task>& tasks() const { return tasks_; }
  const Task& task(std::size_t i) const { return tasks_.at(i); }
  std::size_t size() const { return tasks_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  bool dependencies_inferred() const { return inferred_; }
  const BufferTable& buffers() const { return *buffers_; }
  const KernelRegistry& registry() const { return *registry_; }

  /// Unique producer->consumer pairs, sorted.
  std::vector<std::pair<std::size_t, std::size_t>> dependency_pairs() const {
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const Edge& e : edges_) pairs.emplace(e.from, e.to);
    return {pairs.begin(), pairs.end()};
  }

  bool has_edge(std::size_t from, std::size_t to) const {
    return std::any_of(edges_.begin(), edges_.end(), [&](const Edge& e) { return e.from == from && e.to == to; });
  }

  /// Structural fingerprint: kernels, buffers, spaces, params, guards, outputs.
  std::uint64_t id() const {
    std::ostringstream os;
    os.precision(17);
    for (const Task& t : tasks_) {
      os << t.kernel << '|';
      for (auto b : t.reads) os << 'r' << b.value;
      for (auto b : t.writes) os << 'w' << b.value;
      for (std::size_t i = 0; i < t.space.dims; ++i) os << 's' << t.space.extents[i];
      for (double p : t.params) os << 'p' << p;
      if (t.guard) os << 'g' << t.guard->buffer.value << ':' << t.guard->element << ':' << t.guard->run_if_nonzero;
      os << ';';
    }
    for (auto b : outputs_) os << 'o' << b.value;
    const std::string s = os.str();
    return fnv1a(std::as_bytes(std::span(s)));
  }

 private:
  friend TaskGraph infer_dependencies(TaskGraph graph);
  friend TaskGraph fuse(const TaskGraph& graph, std::size_t a, std::size_t b);

  const BufferTable* buffers_;
  const KernelRegistry* registry_;
  std::vector<Task> tasks_;
  std::vector<Edge> edges_;
  std::vector<BufferId> outputs_;
  bool inferred_ = false;
};

/// RAW edges from the last writer of each read buffer, plus WAW and WAR
/// ordering by submission order. Every edge points forward, so the graph
/// is acyclic by construction.
inline TaskGraph infer_dependencies(TaskGraph graph) {
  struct BufferHistory {
    std::optional<std::size_t> last_writer;
    std::vector<std::size_t> readers;  // readers of last_writer's version
  };
  std::map<BufferId, BufferHistory> history;
  std::map<std::tuple<std::size_t, std::size_t, std::uint32_t>, Hazard> found;
  auto note = [&](std::size_t from, std::size_t to, BufferId b, Hazard h) {
    auto key = std::tuple{from, to, b.value};
    auto it = found.find(key);
    if (it == found.end() || static_cast<int>(h) < static_cast<int>(it->second)) found[key] = h;
  };

  for (std::size_t j = 0; j < graph.tasks_.size(); ++j) {
    const Task& t = graph.tasks_[j];
    for (BufferId b : t.reads) {
      auto& h = history[b];
      if (h.last_writer) note(*h.last_writer, j, b, Hazard::raw);
    }
    for (BufferId b : t.writes) {
      auto& h = history[b];
      if (h.last_writer) note(*h.last_writer, j, b, Hazard::waw);
      for (std::size_t r : h.readers)
        if (r != j) note(r, j, b, Hazard::war);
    }
    for (BufferId b : t.reads)
      if (!t.writes_buffer(b)) history[b].readers.push_back(j);
    for (BufferId b : t.writes) {
      auto& h = history[b];
      h.last_writer = j;
      h.readers.clear();
    }
  }

  graph.edges_.clear();
  for (const auto& [key, hazard] : found) {
    const auto& [from, to, buf] = key;
    graph.edges_.push_back(Edge{from, to, BufferId{buf}, hazard});
  }
  graph.inferred_ = true;
  return graph;
}

/// Kahn's algorithm, smallest ready index first (= submission order
/// restricted to ready tasks). Throws if a cycle is present.
inline std::vector<std::size_t> topological_order(const TaskGraph& graph) {
  const std::size_t n = graph.size();
  std::vector<std::size_t> indegree(n, 0);
  std::vector<std::vector<std::size_t>> succ(n);
  for (auto [from, to] : graph.dependency_pairs()) {
    succ[from].push_back(to);
    ++indegree[to];
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (std::size_t s : succ[i])
      if (--indegree[s] == 0) ready.push(s);
  }
  require(order.size() == n, ErrorCode::dependency, "task graph has a cycle");
  return order;
}

// --- Device mapping ----------------------------------------------------------

class DeviceMapping {
 public:
  DeviceMapping() = default;
  explicit DeviceMapping(std::vector<DeviceId> assignment) : assignment_(std::move(assignment)) {}

  static DeviceMapping uniform(const TaskGraph& graph, DeviceId device) {
    return DeviceMapping(std::vector<DeviceId>(graph.size(), device));
  }

  /// Per-stage devices with a default; tasks carrying a device hint keep it.
  static DeviceMapping by_stage(const TaskGraph& graph, const std::map<std::string, DeviceId>& stages,
                                DeviceId fallback) {
    std::vector<DeviceId> a;
    for (const Task& t : graph.tasks()) {
      if (t.meta.device_hint) {
        a.push_back(*t.meta.device_hint);
        continue;
      }
      auto it = stages.find(t.meta.stage);
      a.push_back(it == stages.end() ? fallback : it->second);
    }
    return DeviceMapping(std::move(a));
  }

  std::size_t size() const { return assignment_.size(); }
  DeviceId at(std::size_t task) const {
    require(task < assignment_.size(), ErrorCode::unmapped_task, "task " + std::to_string(task) + " has no device");
    return assignment_[task];
  }
  const std::vector<DeviceId>& assignment() const { return assignment_; }

  DeviceMapping with(std::size_t task, DeviceId device) const {
    require(task < assignment_.size(), ErrorCode::unmapped_task, "task " + std::to_string(task) + " has no device");
    DeviceMapping m = *this;
    m.assignment_[task] = device;
    return m;
  }

  friend bool operator==(const DeviceMapping&, const DeviceMapping&) = default;

 private:
  std::vector<DeviceId> assignment_;
};

// --- Residency ---------------------------------------------------------------

/// Per-buffer version counters. A copy is valid on a device when the
/// device's version equals the buffer's latest; the owner is the device
/// that produced the latest version.
class ResidencyState {
 public:
  std::uint64_t latest(BufferId b) const { return b.value < entries_.size() ? entries_[b.value].latest : 0; }

  std::optional<DeviceId> owner(BufferId b) const {
    return b.value < entries_.size() ? entries_[b.value].owner : std::nullopt;
  }

  bool valid(BufferId b, DeviceId d) const {
    if (b.value >= entries_.size()) return false;
    const Entry& e = entries_[b.value];
    auto it = e.held.find(d);
    return e.latest > 0 && it != e.held.end() && it->second == e.latest;
  }

  /// Devices holding the latest version, in DeviceId order.
  std::vector<DeviceId> holders(BufferId b) const {
    std::vector<DeviceId> out;
    if (b.value >= entries_.size()) return out;
    for (const auto& [d, v] : entries_[b.value].held)
      if (v == entries_[b.value].latest && v > 0) out.push_back(d);
    return out;
  }

  /// A new version produced on `d`; every other copy becomes stale.
  void write(BufferId b, DeviceId d) {
    Entry& e = entry(b);
    ++e.latest;
    e.owner = d;
    e.held[d] = e.latest;
  }

  void mark_valid(BufferId b, DeviceId d) {
    Entry& e = entry(b);
    require(e.latest > 0, ErrorCode::residency, "buffer " + std::to_string(b.value) + " has no valid version");
    e.held[d] = e.latest;
  }

  /// Contents undefined everywhere until the next write.
  void poison(BufferId b) {
    Entry& e = entry(b);
    ++e.latest;
    e.owner.reset();
  }

  /// Order-independent fingerprint of the whole state.
  std::uint64_t fingerprint() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      os << i << ':' << entries_[i].latest << ':' << (entries_[i].owner ? entries_[i].owner->str() : "-");
      for (const auto& [d, v] : entries_[i].held) os << ',' << d.str() << '=' << v;
      os << ';';
    }
    const std::string s = os.str();
    return fnv1a(std::as_bytes(std::span(s)));
  }

 private:
  struct Entry {
    std::uint64_t latest = 0;
    std::optional<DeviceId> owner;
    std::map<DeviceId, std::uint64_t> held;
  };
  Entry& entry(BufferId b) {
    if (b.value >= entries_.size()) entries_.resize(b.value + 1);
    return entries_[b.value];
  }
  std::vector<Entry> entries_;
};

// --- Transfer planning -------------------------------------------------------

struct CopyRecord {
  BufferId buffer;
  DeviceId src;
  DeviceId dst;
  std::size_t bytes = 0;
  /// The copy must complete before this task; == task count for the
  /// end-of-graph output synchronisation.
  std::size_t before_task = 0;
  /// Task in this graph that produced the copied version, if any.
  std::optional<std::size_t> producer;
  friend bool operator==(const CopyRecord&, const CopyRecord&) = default;
};

struct TransferPlan {
  std::vector<CopyRecord> copies;
  /// For each task, indices into `copies` it must wait for.
  std::vector<std::vector<std::size_t>> task_waits;
  std::uint64_t graph_id = 0;
  std::uint64_t residency_fingerprint = 0;
  DeviceMapping mapping;
  ResidencyState final_state;

  std::size_t total_bytes() const {
    std::size_t n = 0;
    for (const auto& c : copies) n += c.bytes;
    return n;
  }
  std::size_t inter_task_copies() const {
    return static_cast<std::size_t>(std::count_if(copies.begin(), copies.end(), [&](const CopyRecord& c) {
      return c.producer.has_value() && c.before_task < task_waits.size();
    }));
  }
};

/// Simulates the graph in submission order (a topological order, since all
/// edges point forward). Before each task every read buffer whose latest
/// version is missing on the task's device is copied from its owner; after
/// each task its writes become the latest version on that device.
inline TransferPlan plan_transfers(const TaskGraph& graph, const DeviceMapping& mapping, const ResidencyState& residency) {
  require(graph.dependencies_inferred(), ErrorCode::dependency, "plan_transfers before infer_dependencies");
  require(mapping.size() == graph.size(), ErrorCode::unmapped_task,
          "mapping covers " + std::to_string(mapping.size()) + " of " + std::to_string(graph.size()) + " tasks");

  TransferPlan plan;
  plan.graph_id = graph.id();
  plan.residency_fingerprint = residency.fingerprint();
  plan.mapping = mapping;
  plan.task_waits.resize(graph.size());

  ResidencyState state = residency;
  std::map<BufferId, std::size_t> last_writer;
  std::map<std::pair<BufferId, DeviceId>, std::size_t> arrived;  // copy that made (b, d) valid

  auto ensure = [&](BufferId b, DeviceId dst, std::size_t before) -> std::optional<std::size_t> {
    if (state.valid(b, dst)) {
      auto it = arrived.find({b, dst});
      return it == arrived.end() ? std::nullopt : std::optional(it->second);
    }
    std::optional<DeviceId> src = state.owner(b);
    if (!src || !state.valid(b, *src)) {
      auto h = state.holders(b);
      require(!h.empty(), ErrorCode::residency,
              "buffer '" + graph.buffers().at(b).name + "' has no valid copy on any device");
      src = h.front();
    }
    CopyRecord rec{b, *src, dst, graph.buffers().at(b).bytes(), before, std::nullopt};
    if (auto it = last_writer.find(b); it != last_writer.end()) rec.producer = it->second;
    plan.copies.push_back(rec);
    state.mark_valid(b, dst);
    arrived[{b, dst}] = plan.copies.size() - 1;
    return plan.copies.size() - 1;
  };

  for (std::size_t j = 0; j < graph.size(); ++j) {
    const Task& t = graph.task(j);
    const DeviceId d = mapping.at(j);
    for (BufferId b : t.reads)
      if (auto c = ensure(b, d, j)) plan.task_waits[j].push_back(*c);
    for (BufferId b : t.writes) {
      state.write(b, d);
      last_writer[b] = j;
      for (auto it = arrived.begin(); it != arrived.end();)
        it = it->first.first == b ? arrived.erase(it) : std::next(it);
    }
  }
  for (BufferId b : graph.outputs()) ensure(b, kHost, graph.size());

  plan.final_state = std::move(state);
  return plan;
}

// --- Fusion --------------------------------------------------------------------

/// Replaces producer `a` and consumer `b` with the registered fused kernel.
/// `a` must write exactly one buffer, read only by `b`; the intermediate
/// drops out of the graph (and its output list).
inline TaskGraph fuse(const TaskGraph& graph, std::size_t a, std::size_t b) {
  require(graph.dependencies_inferred(), ErrorCode::dependency, "fuse before infer_dependencies");
  require(a < graph.size() && b < graph.size() && a < b, ErrorCode::invalid_argument, "fuse needs task indices a < b");
  require(graph.has_edge(a, b), ErrorCode::dependency,
          "no dependency edge " + std::to_string(a) + "->" + std::to_string(b) + " to fuse");
  const Task& ta = graph.task(a);
  const Task& tb = graph.task(b);
  const KernelRegistry& reg = graph.registry();
  require(reg.at(ta.kernel).contract.elementwise && reg.at(tb.kernel).contract.elementwise,
          ErrorCode::contract_violation, "only elementwise kernels can be fused");
  require(ta.space == tb.space, ErrorCode::contract_violation, "fused tasks need identical index spaces");
  require(!ta.guard && !tb.guard, ErrorCode::contract_violation, "guarded tasks cannot be fused");
  require(ta.writes.size() == 1, ErrorCode::contract_violation, "producer must write exactly one buffer");
  const BufferId mid = ta.writes.front();
  require(tb.reads_buffer(mid) && !tb.writes_buffer(mid) && !ta.reads_buffer(mid), ErrorCode::contract_violation,
          "consumer must read the intermediate without writing it");
  for (std::size_t k = 0; k < graph.size(); ++k) {
    if (k == a || k == b) continue;
    const Task& t = graph.task(k);
    require(!t.reads_buffer(mid) && !t.writes_buffer(mid), ErrorCode::contract_violation,
            "intermediate buffer is used by task " + std::to_string(k));
    if (k > a && k < b) {
      for (BufferId r : ta.reads) require(!t.writes_buffer(r), ErrorCode::dependency, "fusion would reorder a write");
      for (BufferId r : tb.reads) require(!t.writes_buffer(r), ErrorCode::dependency, "fusion would reorder a write");
      for (BufferId w : tb.writes)
        require(!t.writes_buffer(w) && !t.reads_buffer(w), ErrorCode::dependency, "fusion would reorder an access");
    }
  }
  const auto fused_name = reg.fused_of(ta.kernel, tb.kernel);
  require(fused_name.has_value(), ErrorCode::unknown_kernel, "no fused kernel for " + ta.kernel + "+" + tb.kernel);

  Task fused;
  fused.kernel = *fused_name;
  fused.reads = ta.reads;
  for (BufferId r : tb.reads)
    if (r != mid) fused.reads.push_back(r);
  fused.writes = tb.writes;
  fused.space = ta.space;
  fused.params = ta.params;
  fused.params.insert(fused.params.end(), tb.params.begin(), tb.params.end());
  fused.meta = ta.meta;

  TaskGraph out(graph.buffers(), reg);
  for (std::size_t k = 0; k < graph.size(); ++k) {
    if (k == a) out.add_task(fused);
    else if (k != b) out.add_task(graph.task(k));
  }
  for (BufferId o : graph.outputs())
    if (o != mid) out.add_output(o);
  return infer_dependencies(std::move(out));
}

// --- DOT dump --------------------------------------------------------------------

/// Nodes "idx:kernel@device", edges labelled "buffer#id bytes".
inline std::string to_dot(const TaskGraph& graph, const DeviceMapping* mapping = nullptr) {
  std::ostringstream os;
  os << "digraph taskgraph {\n  rankdir=TB;\n  node [shape=box];\n";
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Task& t = graph.task(i);
    os << "  t" << i << " [label=\"" << i << ':' << t.kernel << '@'
       << (mapping && i < mapping->size() ? mapping->at(i).str() : std::string("unmapped")) << "\"";
    if (t.guard) os << ", style=dashed";
    os << "];\n";
  }
  for (const Edge& e : graph.edges()) {
    const BufferDesc& d = graph.buffers().at(e.buffer);
    os << "  t" << e.from << " -> t" << e.to << " [label=\"" << d.name << '#' << e.buffer.value << ' ' << d.bytes()
       << "B\"";
    if (e.hazard != Hazard::raw) os << ", style=dotted";
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace hetflow
