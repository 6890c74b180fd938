#include <gtest/gtest.h>

#include <atomic>
#include <bit>
#include <numeric>
#include <random>

#include "hetflow/device.hpp"
#include "hetflow/hash.hpp"
#include "hetflow/kernel.hpp"

using namespace hetflow;

namespace {

KernelEntry sum_kernel() {
  KernelEntry k;
  k.name = "square";
  k.contract = {1, 1, 0, true, 4.0};
  k.body = [](const KernelArgs& a, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) a.out<float>(0)[i] = a.in<float>(0)[i] * a.in<float>(0)[i] + 0.1f;
  };
  return k;
}

std::vector<float> run_on(Device& dev, const std::vector<float>& input) {
  std::vector<float> out(input.size());
  const std::span<const std::byte> r = std::as_bytes(std::span(input));
  const std::span<std::byte> w = std::as_writable_bytes(std::span(out));
  const std::span<const std::byte> reads[] = {r};
  const std::span<std::byte> writes[] = {w};
  dev.launch(sum_kernel(), KernelArgs{reads, writes, {}, IndexSpace{input.size()}});
  return out;
}

}  // namespace

TEST(DeviceId, FormatsAndParses) {
  EXPECT_EQ(kHost.str(), "serial-cpu:0");
  EXPECT_EQ(DeviceId::parse("sim-accel:2"), (DeviceId{DeviceKind::sim_accel, 2}));
  EXPECT_EQ(DeviceId::parse("parallel-cpu"), (DeviceId{DeviceKind::parallel_cpu, 0}));
  EXPECT_THROW(DeviceId::parse("gpu:0"), Error);
  EXPECT_THROW(DeviceId::parse("sim-accel:x"), Error);
}

TEST(SimAccel, ConfigValidation) {
  SimAccelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.bandwidth = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.latency = -1;
  EXPECT_THROW(SimAccelDevice(0, c), Error);
}

TEST(SimAccel, TransferTimeForOneMebibyte) {
  SimAccelConfig c;
  c.bandwidth = 1024.0 * 1024 * 1024;
  c.latency = 10e-6;
  EXPECT_NEAR(c.transfer_time(1 << 20), 1.0 / 1024 + 10e-6, 1e-15);
  SimAccelDevice accel(0, c);
  SerialCpuDevice host;
  ParallelCpuDevice par(0, 2);
  EXPECT_NEAR(modeled_copy_time(host, accel, 1 << 20), 1.0 / 1024 + 10e-6, 1e-15);
  EXPECT_NEAR(modeled_copy_time(accel, host, 1 << 20), 1.0 / 1024 + 10e-6, 1e-15);
  EXPECT_EQ(modeled_copy_time(host, par, 1 << 20), 0.0);
}

TEST(SimAccel, ModeledLaunchTime) {
  SimAccelConfig c;
  SimAccelDevice accel(0, c);
  const std::vector<float> in(1000, 1.0f);
  std::vector<float> out(1000);
  const std::span<const std::byte> reads[] = {std::as_bytes(std::span(in))};
  const std::span<std::byte> writes[] = {std::as_writable_bytes(std::span(out))};
  const LaunchTiming t = accel.launch(sum_kernel(), KernelArgs{reads, writes, {}, IndexSpace{1000}});
  EXPECT_NEAR(t.modeled, c.launch_overhead + 1000 * 4.0 / c.throughput, 1e-15);
  EXPECT_GE(t.wall, 0.0);
}

TEST(Devices, AllKindsProduceIdenticalBits) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-3, 3);
  std::vector<float> input(10007);
  for (float& x : input) x = u(rng);
  SerialCpuDevice serial;
  ParallelCpuDevice par(0, 4);
  SimAccelDevice accel(0, {}, 3);
  const auto a = run_on(serial, input);
  const auto b = run_on(par, input);
  const auto c = run_on(accel, input);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * 4), 0);
  EXPECT_EQ(std::memcmp(a.data(), c.data(), a.size() * 4), 0);
}

TEST(Devices, EmptyIndexSpaceIsRejected) {
  SerialCpuDevice serial;
  IndexSpace empty;
  empty.extents = {0, 1, 1};
  EXPECT_THROW(serial.launch(sum_kernel(), KernelArgs{{}, {}, {}, empty}), Error);
}

TEST(Devices, ParallelPartitionsCoverEachIndexOnce) {
  ParallelCpuDevice par(0, 3);
  std::vector<std::atomic<int>> hits(5000);
  KernelEntry k{"count", {0, 0, 0, true}, [&](const KernelArgs&, std::size_t b, std::size_t e) {
                  for (std::size_t i = b; i < e; ++i) hits[i].fetch_add(1);
                }, {}};
  for (int rep = 0; rep < 20; ++rep) par.launch(k, KernelArgs{{}, {}, {}, IndexSpace{50, 100}});
  for (auto& h : hits) EXPECT_EQ(h.load(), 20);
}

TEST(Devices, BodyExceptionPropagates) {
  ParallelCpuDevice par(0, 2);
  KernelEntry k{"bad", {0, 0, 0, true}, [](const KernelArgs&, std::size_t b, std::size_t) {
                  if (b > 0) throw std::runtime_error("bad partition");
                }, {}};
  EXPECT_THROW(par.launch(k, KernelArgs{{}, {}, {}, IndexSpace{64}}), std::runtime_error);
  // The pool is still usable afterwards.
  KernelEntry ok{"ok", {0, 0, 0, true}, [](const KernelArgs&, std::size_t, std::size_t) {}, {}};
  EXPECT_NO_THROW(par.launch(ok, KernelArgs{{}, {}, {}, IndexSpace{64}}));
}

TEST(KernelRegistry, DuplicateAndFrozen) {
  KernelRegistry reg;
  auto body = [](const KernelArgs&, std::size_t, std::size_t) {};
  reg.register_kernel("k", {}, body);
  try {
    reg.register_kernel("k", {}, body);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::duplicate);
  }
  EXPECT_THROW(reg.at("missing"), Error);
  reg.freeze();
  EXPECT_THROW(reg.register_kernel("k2", {}, body), Error);
  EXPECT_EQ(reg.size(), 1u);
}

TEST(TreeReduce, FixedTreeIsIndependentOfPartialFill) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (std::size_t n : {1u, 2u, 3u, 7u, 64u, 1000u}) {
    std::vector<float> values(n);
    for (float& x : values) x = u(rng);
    std::vector<float> a = values, b = values;
    const float ra = tree_reduce(std::span(a), std::plus<float>());
    const float rb = tree_reduce(std::span(b), std::plus<float>());
    EXPECT_EQ(std::bit_cast<std::uint32_t>(ra), std::bit_cast<std::uint32_t>(rb));
    const double exact = std::accumulate(values.begin(), values.end(), 0.0);
    EXPECT_NEAR(ra, exact, 1e-3 * n);
  }
  std::vector<int> none;
  EXPECT_THROW(tree_reduce(std::span(none), std::plus<int>()), Error);
}

TEST(TreeReduce, MatchesExplicitPairing) {
  std::vector<std::string> parts = {"a", "b", "c", "d", "e"};
  const std::string r = tree_reduce(std::span(parts), [](const std::string& x, const std::string& y) {
    return "(" + x + y + ")";
  });
  EXPECT_EQ(r, "(((ab)(cd))e)");
}

TEST(Hash, SplitMixIsReproducible) {
  SplitMix64 a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  SplitMix64 c(0);
  EXPECT_EQ(c.next(), 0xE220A8397B1DCDAFull);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(c.below(17), 17u);
}
