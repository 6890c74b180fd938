#pragma once

// Execution backends. Every device owns a private memory space keyed by
// buffer id; the task-graph scheduler decides what lives where.
//
// An OpenCL-backed device would slot in behind the same surface: allocate()
// maps to clCreateBuffer, copy_bytes() to clEnqueueCopyBuffer/Read/Write and
// run_partitions() to clEnqueueNDRangeKernel. No such backend is shipped.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hetflow/buffer.hpp"
#include "hetflow/error.hpp"
#include "hetflow/hash.hpp"
#include "hetflow/kernel.hpp"

namespace hetflow {

enum class DeviceKind { serial_cpu, parallel_cpu, sim_accel };

inline const char* to_string(DeviceKind k) {
  switch (k) {
    case DeviceKind::serial_cpu: return "serial-cpu";
    case DeviceKind::parallel_cpu: return "parallel-cpu";
    case DeviceKind::sim_accel: return "sim-accel";
  }
  return "?";
}

struct DeviceId {
  DeviceKind kind = DeviceKind::serial_cpu;
  std::uint32_t index = 0;

  friend constexpr auto operator<=>(const DeviceId&, const DeviceId&) = default;

  std::string str() const { return std::string(to_string(kind)) + ":" + std::to_string(index); }

  /// "sim-accel" or "sim-accel:1".
  static DeviceId parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    std::uint32_t index = 0;
    if (colon != std::string::npos) {
      try {
        index = static_cast<std::uint32_t>(std::stoul(text.substr(colon + 1)));
      } catch (const std::exception&) {
        fail(ErrorCode::invalid_argument, "bad device index in '" + text + "'");
      }
    }
    for (DeviceKind k : {DeviceKind::serial_cpu, DeviceKind::parallel_cpu, DeviceKind::sim_accel})
      if (kind == to_string(k)) return {k, index};
    fail(ErrorCode::invalid_argument, "unknown device kind '" + kind + "'");
  }
};

/// The host is serial-cpu:0 by convention; inputs originate and outputs land there.
inline constexpr DeviceId kHost{DeviceKind::serial_cpu, 0};

/// Modeled cost of the simulated accelerator. Values are configuration, not
/// measurements of any real device.
struct SimAccelConfig {
  double bandwidth = 6.0 * 1024 * 1024 * 1024;  // bytes / s
  double latency = 20e-6;                       // s per transfer
  double launch_overhead = 10e-6;               // s per launch
  double throughput = 50e9;                     // modeled ops / s

  void validate() const {
    require(bandwidth > 0 && latency > 0 && launch_overhead > 0 && throughput > 0, ErrorCode::invalid_argument,
            "sim-accel config values must be strictly positive");
  }

  double transfer_time(std::size_t bytes) const { return latency + static_cast<double>(bytes) / bandwidth; }
};

struct LaunchTiming {
  double wall = 0.0;     // seconds
  double modeled = 0.0;  // seconds
};

/// Fixed set of worker threads that executes index partitions. Launches from
/// different callers are serialised; a pool only runs partitions it created.
class WorkerPool {
 public:
  explicit WorkerPool(unsigned workers) : workers_(std::max(1u, workers)) {
    for (unsigned i = 1; i < workers_; ++i) threads_.emplace_back([this] { loop(); });
  }
  ~WorkerPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    wake_.notify_all();
    threads_.clear();
  }
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  unsigned workers() const { return workers_; }

  /// Runs fn(part) for part in [0, parts). The calling thread participates.
  void run(std::size_t parts, const std::function<void(std::size_t)>& fn) {
    std::lock_guard launch_lock(launch_mutex_);
    if (workers_ == 1 || parts <= 1) {
      for (std::size_t p = 0; p < parts; ++p) fn(p);
      return;
    }
    {
      std::lock_guard lock(mutex_);
      job_.store(&fn);
      parts_.store(parts);
      next_.store(0);
      done_ = 0;
      error_ = nullptr;
      ++generation_;
    }
    wake_.notify_all();
    drain();
    std::unique_lock lock(mutex_);
    finished_.wait(lock, [&] { return done_ == parts_.load(); });
    job_.store(nullptr);
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void drain() {
    for (;;) {
      const std::size_t p = next_.fetch_add(1);
      if (p >= parts_.load()) return;
      std::exception_ptr err;
      try {
        (*job_.load())(p);
      } catch (...) {
        err = std::current_exception();
      }
      std::lock_guard lock(mutex_);
      if (err && !error_) error_ = err;
      if (++done_ == parts_.load()) finished_.notify_all();
    }
  }

  void loop() {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock lock(mutex_);
        wake_.wait(lock, [&] { return stop_ || (generation_ != seen && job_.load() != nullptr); });
        if (stop_) return;
        seen = generation_;
      }
      drain();
    }
  }

  unsigned workers_;
  std::vector<std::jthread> threads_;
  std::mutex launch_mutex_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable finished_;
  std::atomic<const std::function<void(std::size_t)>*> job_{nullptr};
  std::atomic<std::size_t> parts_{0};
  std::atomic<std::size_t> next_{0};
  std::size_t done_ = 0;
  std::uint64_t generation_ = 0;
  std::exception_ptr error_;
  bool stop_ = false;
};

class DeviceMemory {
 public:
  /// Not thread-safe; allocation happens before workers start.
  void allocate(BufferId id, std::size_t bytes) {
    auto it = blocks_.find(id.value);
    if (it != blocks_.end()) {
      require(it->second.size() == bytes, ErrorCode::invalid_argument, "buffer reallocated with a different size");
      return;
    }
    blocks_.emplace(id.value, AlignedBytes(bytes));
  }
  bool has(BufferId id) const { return blocks_.contains(id.value); }
  std::span<std::byte> view(BufferId id) {
    auto it = blocks_.find(id.value);
    require(it != blocks_.end(), ErrorCode::residency, "buffer " + std::to_string(id.value) + " not allocated on device");
    return it->second.span();
  }
  std::span<const std::byte> view(BufferId id) const {
    auto it = blocks_.find(id.value);
    require(it != blocks_.end(), ErrorCode::residency, "buffer " + std::to_string(id.value) + " not allocated on device");
    return it->second.span();
  }

 private:
  std::unordered_map<std::uint32_t, AlignedBytes> blocks_;
};

class Device {
 public:
  explicit Device(DeviceId id) : id_(id) {}
  virtual ~Device() = default;
  Device(const Device&) = delete;
  Device& operator=(const Device&) = delete;

  DeviceId id() const { return id_; }
  virtual unsigned workers() const { return 1; }
  virtual std::string config_string() const { return "-"; }
  virtual const SimAccelConfig* sim_config() const { return nullptr; }

  DeviceMemory& memory() { return memory_; }
  const DeviceMemory& memory() const { return memory_; }

  /// Runs one kernel over args.space. With `guard_reads`, every read slot not
  /// flagged in `rmw_reads` is hashed before and after the launch and any
  /// change is reported as a contract violation.
  LaunchTiming launch(const KernelEntry& kernel, const KernelArgs& args, bool guard_reads = false,
                      const std::vector<bool>& rmw_reads = {}) {
    require(args.space.valid() && args.space.size() > 0, ErrorCode::invalid_argument,
            "empty index space for kernel '" + kernel.name + "'");
    std::vector<std::uint64_t> before;
    if (guard_reads)
      for (const auto& r : args.reads) before.push_back(fnv1a(r));

    const auto start = std::chrono::steady_clock::now();
    run_partitions(kernel, args);
    if (kernel.epilogue) kernel.epilogue(args);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (guard_reads)
      for (std::size_t i = 0; i < args.reads.size(); ++i) {
        if (i < rmw_reads.size() && rmw_reads[i]) continue;
        if (fnv1a(args.reads[i]) != before[i])
          fail(ErrorCode::contract_violation,
               "kernel '" + kernel.name + "' wrote to read-only slot " + std::to_string(i));
      }
    return {wall, model_launch(kernel, args.space.size(), wall)};
  }

 protected:
  virtual void run_partitions(const KernelEntry& kernel, const KernelArgs& args) = 0;
  virtual double model_launch(const KernelEntry&, std::size_t, double wall) const { return wall; }

 private:
  DeviceId id_;
  DeviceMemory memory_;
};

class SerialCpuDevice final : public Device {
 public:
  explicit SerialCpuDevice(std::uint32_t index = 0) : Device({DeviceKind::serial_cpu, index}) {}

 protected:
  void run_partitions(const KernelEntry& kernel, const KernelArgs& args) override {
    kernel.body(args, 0, args.space.size());
  }
};

namespace detail {
/// Contiguous partitions; several per worker for load balance.
inline void run_partitioned(WorkerPool& pool, const KernelEntry& kernel, const KernelArgs& args) {
  const std::size_t n = args.space.size();
  const std::size_t parts = std::min<std::size_t>(n, static_cast<std::size_t>(pool.workers()) * 4);
  pool.run(parts, [&](std::size_t p) {
    const std::size_t begin = n * p / parts;
    const std::size_t end = n * (p + 1) / parts;
    if (begin < end) kernel.body(args, begin, end);
  });
}
}  // namespace detail

class ParallelCpuDevice final : public Device {
 public:
  ParallelCpuDevice(std::uint32_t index, unsigned workers)
      : Device({DeviceKind::parallel_cpu, index}), pool_(workers) {}
  unsigned workers() const override { return pool_.workers(); }

 protected:
  void run_partitions(const KernelEntry& kernel, const KernelArgs& args) override {
    detail::run_partitioned(pool_, kernel, args);
  }

 private:
  WorkerPool pool_;
};

/// Stand-in for a discrete accelerator: runs kernels on host threads and
/// reports modeled time = launch overhead + items * ops_per_item / throughput.
class SimAccelDevice final : public Device {
 public:
  SimAccelDevice(std::uint32_t index, SimAccelConfig config, unsigned workers = 1)
      : Device({DeviceKind::sim_accel, index}), config_(config), pool_(workers) {
    config_.validate();
  }
  unsigned workers() const override { return pool_.workers(); }
  const SimAccelConfig* sim_config() const override { return &config_; }
  std::string config_string() const override {
    std::ostringstream os;
    os << "bandwidth=" << config_.bandwidth << "B/s latency=" << config_.latency << "s overhead="
       << config_.launch_overhead << "s throughput=" << config_.throughput << "ops/s";
    return os.str();
  }

 protected:
  void run_partitions(const KernelEntry& kernel, const KernelArgs& args) override {
    detail::run_partitioned(pool_, kernel, args);
  }
  double model_launch(const KernelEntry& kernel, std::size_t items, double) const override {
    return config_.launch_overhead + static_cast<double>(items) * kernel.contract.ops_per_item / config_.throughput;
  }

 private:
  SimAccelConfig config_;
  WorkerPool pool_;
};

/// Modeled cost of moving `bytes` between two devices: latency + bytes /
/// bandwidth when either side is a simulated accelerator, otherwise zero.
inline double modeled_copy_time(const Device& src, const Device& dst, std::size_t bytes) {
  if (src.id() == dst.id()) return 0.0;
  if (const SimAccelConfig* c = dst.sim_config()) return c->transfer_time(bytes);
  if (const SimAccelConfig* c = src.sim_config()) return c->transfer_time(bytes);
  return 0.0;
}

/// Raw byte copy between device memories; both sides must be allocated.
inline double copy_bytes(Device& src, Device& dst, BufferId id) {
  if (src.id() == dst.id()) return 0.0;
  auto from = src.memory().view(id);
  auto to = dst.memory().view(id);
  require(from.size() == to.size(), ErrorCode::residency, "copy between differently sized allocations");
  std::memcpy(to.data(), from.data(), from.size());
  return modeled_copy_time(src, dst, from.size());
}

}  // namespace hetflow
