#pragma once

// Session object: buffers, kernels, devices and residency, plus the executor
// that runs a planned task graph.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hetflow/buffer.hpp"
#include "hetflow/device.hpp"
#include "hetflow/error.hpp"
#include "hetflow/kernel.hpp"
#include "hetflow/taskgraph.hpp"

namespace hetflow {

struct ExecuteOptions {
  /// Executor threads. 1 runs nodes in plan order on the calling thread.
  unsigned workers = 1;
  /// Hash read-only buffers around every launch (shadow check).
  bool guard_reads = false;
  /// Called at every inter-task boundary with the number of tasks completed
  /// so far (0..N). Serial execution only.
  std::function<void(std::size_t tick)> on_boundary;
  std::uint64_t seed = 0;
};

struct TaskRecord {
  std::size_t task = 0;
  std::string kernel;
  std::string stage;
  DeviceId device;
  bool launched = false;
  double wall = 0.0;
  double modeled = 0.0;
};

struct ExecutionReport {
  std::uint64_t graph_id = 0;
  std::uint64_t seed = 0;
  std::vector<TaskRecord> tasks;
  std::size_t launches = 0;
  std::size_t transfers = 0;
  std::size_t bytes_to_device = 0;   // host -> other device
  std::size_t bytes_to_host = 0;     // other device -> host
  std::size_t bytes_between = 0;     // neither side is the host
  double transfer_modeled = 0.0;
  double launch_modeled = 0.0;
  double wall = 0.0;

  std::size_t bytes_total() const { return bytes_to_device + bytes_to_host + bytes_between; }
  /// Serial-schedule modeled time: every launch plus every transfer.
  double modeled_total() const { return launch_modeled + transfer_modeled; }
};

class Runtime {
 public:
  Runtime() { devices_.push_back(std::make_unique<SerialCpuDevice>(0)); }
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  BufferTable& buffers() { return buffers_; }
  const BufferTable& buffers() const { return buffers_; }
  KernelRegistry& registry() { return registry_; }
  const KernelRegistry& registry() const { return registry_; }
  ResidencyState& residency() { return residency_; }
  const ResidencyState& residency() const { return residency_; }

  BufferId declare(std::string name, ElementType element, std::vector<std::size_t> extents) {
    return buffers_.declare(std::move(name), element, std::move(extents));
  }

  TaskGraph new_graph() const { return TaskGraph(buffers_, registry_); }

  Device& add_serial_cpu() { return add(std::make_unique<SerialCpuDevice>(next_index(DeviceKind::serial_cpu))); }
  Device& add_parallel_cpu(unsigned workers) {
    return add(std::make_unique<ParallelCpuDevice>(next_index(DeviceKind::parallel_cpu), workers));
  }
  Device& add_sim_accel(SimAccelConfig config = {}, unsigned workers = 1) {
    return add(std::make_unique<SimAccelDevice>(next_index(DeviceKind::sim_accel), config, workers));
  }

  bool has_device(DeviceId id) const { return find(id) != nullptr; }
  Device& device(DeviceId id) {
    Device* d = find(id);
    if (!d) fail(ErrorCode::invalid_argument, "device " + id.str() + " not registered");
    return *d;
  }
  Device& host() { return *devices_.front(); }
  std::vector<const Device*> devices() const {
    std::vector<const Device*> out;
    for (const auto& d : devices_) out.push_back(d.get());
    return out;
  }

  /// Host overwrites the buffer; becomes the only valid copy.
  void host_write(BufferId b, std::span<const std::byte> bytes) {
    const BufferDesc& d = buffers_.at(b);
    require(bytes.size() == d.bytes(), ErrorCode::invalid_argument,
            "host_write of " + std::to_string(bytes.size()) + " bytes into '" + d.name + "' (" + std::to_string(d.bytes()) + ")");
    reject_if_executing("host_write");
    host().memory().allocate(b, d.bytes());
    std::memcpy(host().memory().view(b).data(), bytes.data(), bytes.size());
    residency_.write(b, kHost);
  }
  template <class T>
  void host_write(BufferId b, std::span<const T> values) {
    host_write(b, std::as_bytes(values));
  }

  /// Host view of the latest version; the buffer must already be valid there.
  std::span<const std::byte> host_read(BufferId b) const {
    require(residency_.valid(b, kHost), ErrorCode::residency,
            "buffer '" + buffers_.at(b).name + "' is not valid on the host");
    return devices_.front()->memory().view(b);
  }
  template <class T>
  std::span<const T> host_view(BufferId b) const {
    return as_span<T>(host_read(b));
  }

  /// Mutable access to a buffer wherever it is valid, used by fault injection.
  std::vector<std::span<std::byte>> valid_copies(BufferId b) {
    std::vector<std::span<std::byte>> out;
    for (DeviceId d : residency_.holders(b)) out.push_back(device(d).memory().view(b));
    return out;
  }

  /// Standalone copy outside any graph; returns modeled seconds.
  double copy(BufferId b, DeviceId src, DeviceId dst) {
    reject_if_executing("copy");
    if (src == dst) return 0.0;
    require(residency_.valid(b, src), ErrorCode::residency,
            "copy of '" + buffers_.at(b).name + "' from " + src.str() + " where it is not valid");
    Device& s = device(src);
    Device& d = device(dst);
    d.memory().allocate(b, buffers_.at(b).bytes());
    const double t = copy_bytes(s, d, b);
    residency_.mark_valid(b, dst);
    return t;
  }

  /// Mappings change only between executions.
  DeviceMapping remap(const DeviceMapping& mapping, std::size_t task, DeviceId device) const {
    reject_if_executing("remap");
    require(find(device) != nullptr, ErrorCode::invalid_argument, "device " + device.str() + " not registered");
    return mapping.with(task, device);
  }

  bool executing() const { return executing_.load(); }

  TransferPlan plan(const TaskGraph& graph, const DeviceMapping& mapping) const {
    for (DeviceId d : mapping.assignment())
      require(find(d) != nullptr, ErrorCode::invalid_argument, "mapping uses unregistered device " + d.str());
    return plan_transfers(graph, mapping, residency_);
  }

  ExecutionReport run(const TaskGraph& graph, const DeviceMapping& mapping, const ExecuteOptions& options = {}) {
    return execute(graph, mapping, plan(graph, mapping), options);
  }

  ExecutionReport execute(const TaskGraph& graph, const DeviceMapping& mapping, const TransferPlan& plan,
                          const ExecuteOptions& options = {});

 private:
  Device* find(DeviceId id) const {
    for (const auto& d : devices_)
      if (d->id() == id) return d.get();
    return nullptr;
  }
  std::uint32_t next_index(DeviceKind kind) const {
    std::uint32_t n = 0;
    for (const auto& d : devices_)
      if (d->id().kind == kind) ++n;
    return n;
  }
  Device& add(std::unique_ptr<Device> d) {
    reject_if_executing("add device");
    devices_.push_back(std::move(d));
    return *devices_.back();
  }
  void reject_if_executing(const char* what) const {
    require(!executing_.load(), ErrorCode::busy, std::string(what) + " rejected while a graph is executing");
  }

  BufferTable buffers_;
  KernelRegistry registry_;
  ResidencyState residency_;
  std::vector<std::unique_ptr<Device>> devices_;
  std::atomic<bool> executing_{false};
};

// --- Executor ---------------------------------------------------------------------

namespace detail {

struct ExecNode {
  bool is_copy = false;
  std::size_t index = 0;  // task index or copy index
  std::vector<std::size_t> successors;
  std::size_t deps = 0;
};

}  // namespace detail

inline ExecutionReport Runtime::execute(const TaskGraph& graph, const DeviceMapping& mapping, const TransferPlan& plan,
                                        const ExecuteOptions& options) {
  require(graph.dependencies_inferred(), ErrorCode::dependency, "execute before infer_dependencies");
  require(plan.graph_id == graph.id() && plan.mapping == mapping && plan.task_waits.size() == graph.size(),
          ErrorCode::invalid_argument, "transfer plan was produced for a different graph or mapping");
  require(plan.residency_fingerprint == residency_.fingerprint(), ErrorCode::residency,
          "transfer plan is stale: residency changed since planning");
  require(options.workers <= 1 || !options.on_boundary, ErrorCode::invalid_argument,
          "boundary hooks need serial execution");
  bool expected = false;
  require(executing_.compare_exchange_strong(expected, true), ErrorCode::busy, "graph already executing");
  struct Reset {
    std::atomic<bool>& flag;
    ~Reset() { flag.store(false); }
  } reset{executing_};

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = graph.size();

  // Allocation happens up front, single-threaded.
  for (std::size_t j = 0; j < n; ++j) {
    Device& dev = device(mapping.at(j));
    const Task& t = graph.task(j);
    for (BufferId b : t.reads) dev.memory().allocate(b, buffers_.at(b).bytes());
    for (BufferId b : t.writes) dev.memory().allocate(b, buffers_.at(b).bytes());
  }
  for (const CopyRecord& c : plan.copies) device(c.dst).memory().allocate(c.buffer, c.bytes);

  ExecutionReport report;
  report.graph_id = graph.id();
  report.seed = options.seed;
  report.tasks.resize(n);
  std::vector<double> copy_modeled(plan.copies.size(), 0.0);

  auto run_copy = [&](std::size_t c) {
    const CopyRecord& rec = plan.copies[c];
    copy_modeled[c] = copy_bytes(device(rec.src), device(rec.dst), rec.buffer);
  };

  auto run_task = [&](std::size_t j) {
    const Task& t = graph.task(j);
    Device& dev = device(mapping.at(j));
    TaskRecord& rec = report.tasks[j];
    rec.task = j;
    rec.kernel = t.kernel;
    rec.stage = t.meta.stage;
    rec.device = dev.id();
    if (t.guard) {
      const float flag = as_span<float>(std::span<const std::byte>(dev.memory().view(t.guard->buffer)))[t.guard->element];
      if ((flag != 0.0f) != t.guard->run_if_nonzero) return;
    }
    std::vector<std::span<const std::byte>> reads;
    std::vector<std::span<std::byte>> writes;
    std::vector<bool> rmw;
    for (BufferId b : t.reads) {
      reads.push_back(dev.memory().view(b));
      rmw.push_back(t.writes_buffer(b));
    }
    for (BufferId b : t.writes) writes.push_back(dev.memory().view(b));
    KernelArgs args{reads, writes, t.params, t.space};
    try {
      const LaunchTiming timing = dev.launch(registry_.at(t.kernel), args, options.guard_reads, rmw);
      rec.launched = true;
      rec.wall = timing.wall;
      rec.modeled = timing.modeled;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::contract_violation) throw;
      fail(ErrorCode::kernel_failure, "task " + std::to_string(j) + " (" + t.kernel + "@" + dev.id().str() + "): " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorCode::kernel_failure, "task " + std::to_string(j) + " (" + t.kernel + "@" + dev.id().str() + "): " + e.what());
    }
  };

  auto discard = [&]() {
    // Partial results are unusable; every buffer the graph writes is poisoned.
    for (const Task& t : graph.tasks())
      for (BufferId b : t.writes) residency_.poison(b);
  };

  try {
    if (options.workers <= 1) {
      std::size_t next_copy = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (options.on_boundary) options.on_boundary(j);
        while (next_copy < plan.copies.size() && plan.copies[next_copy].before_task == j) run_copy(next_copy++);
        run_task(j);
      }
      if (options.on_boundary) options.on_boundary(n);
      while (next_copy < plan.copies.size()) run_copy(next_copy++);
    } else {
      // Nodes: tasks [0, n), copies [n, n + copies).
      std::vector<detail::ExecNode> nodes(n + plan.copies.size());
      auto link = [&](std::size_t from, std::size_t to) {
        nodes[from].successors.push_back(to);
        ++nodes[to].deps;
      };
      for (std::size_t j = 0; j < n; ++j) nodes[j].index = j;
      for (std::size_t c = 0; c < plan.copies.size(); ++c) {
        nodes[n + c].is_copy = true;
        nodes[n + c].index = c;
        if (plan.copies[c].producer) link(*plan.copies[c].producer, n + c);
        // Output synchronisation waits for the whole graph.
        if (plan.copies[c].before_task == n)
          for (std::size_t j = 0; j < n; ++j)
            if (j != plan.copies[c].producer) link(j, n + c);
      }
      for (auto [from, to] : graph.dependency_pairs()) link(from, to);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c : plan.task_waits[j]) link(n + c, j);

      std::mutex m;
      std::condition_variable cv;
      std::deque<std::size_t> ready;
      std::size_t remaining = nodes.size();
      std::exception_ptr error;
      bool stop = false;
      for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].deps == 0) ready.push_back(i);

      auto worker = [&] {
        for (;;) {
          std::size_t node;
          {
            std::unique_lock lock(m);
            cv.wait(lock, [&] { return stop || !ready.empty() || remaining == 0; });
            if (stop || remaining == 0) return;
            node = ready.front();
            ready.pop_front();
          }
          std::exception_ptr err;
          try {
            if (nodes[node].is_copy) run_copy(nodes[node].index);
            else run_task(nodes[node].index);
          } catch (...) {
            err = std::current_exception();
          }
          std::lock_guard lock(m);
          if (err) {
            if (!error) error = err;
            stop = true;
          } else {
            --remaining;
            for (std::size_t s : nodes[node].successors)
              if (--nodes[s].deps == 0) ready.push_back(s);
          }
          cv.notify_all();
        }
      };
      {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < options.workers; ++w) pool.emplace_back(worker);
      }
      if (error) std::rethrow_exception(error);
    }
  } catch (...) {
    discard();
    throw;
  }

  residency_ = plan.final_state;

  for (const TaskRecord& r : report.tasks)
    if (r.launched) {
      ++report.launches;
      report.launch_modeled += r.modeled;
    }
  for (std::size_t c = 0; c < plan.copies.size(); ++c) {
    const CopyRecord& rec = plan.copies[c];
    ++report.transfers;
    report.transfer_modeled += copy_modeled[c];
    if (rec.src == kHost) report.bytes_to_device += rec.bytes;
    else if (rec.dst == kHost) report.bytes_to_host += rec.bytes;
    else report.bytes_between += rec.bytes;
  }
  report.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace hetflow
