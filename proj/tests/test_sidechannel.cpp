#include <afterimage/programs.hpp>
#include <afterimage/sidechannel.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace afterimage;

namespace {

const Address kPage{0x3456000};
const Address kIfIp{0x4010A0};
const Address kElseIp{0x4011B4};

Address line(std::int64_t l) { return kPage + l * 64; }

void train(Core& core, Address ip, std::int64_t stride_lines, int iterations = 3) {
  for (int i = 0; i < iterations; ++i) core.load(ip, line(i * stride_lines));
}

}  // namespace

TEST(PrimeProbe, QuietSystemEvictsNothing) {
  Core core;
  std::mt19937_64 rng(1);
  const auto sets = eviction_sets_for_page(core.cache().config(), kPage, 0x400000, rng);
  const auto primed = prime(core.cache(), sets);
  EXPECT_TRUE(probe(core.cache(), sets, primed).evicted_indices().empty());
}

TEST(PrimeProbe, IfPathLeavesTwoSetsSevenApart) {
  Core core;
  std::mt19937_64 rng(1);
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  core.cache().flush_page(kPage);
  const auto sets = eviction_sets_for_page(core.cache().config(), kPage, 0x400000, rng);
  const auto primed = prime(core.cache(), sets);
  core.load(Address{0x9990A0}, line(30));
  const auto evicted = probe(core.cache(), sets, primed).evicted_indices();
  EXPECT_EQ(evicted, (std::vector<unsigned>{30, 37}));
}

TEST(PrimeProbe, TimingDeltaSignAndThreshold) {
  Cache cache;
  std::mt19937_64 rng(1);
  const auto sets = eviction_sets_for_page(cache.config(), kPage, 0x400000, rng);
  TimingVector primed{Phase::prime, std::vector<std::uint32_t>(sets.size(), 40)};
  cache.clear();  // every member misses: probe time 200
  const auto map = probe(cache, sets, primed);
  ASSERT_EQ(map.delta.size(), sets.size());
  EXPECT_EQ(map.delta[0], -160);
  EXPECT_EQ(map.evicted_indices().size(), sets.size());
}

TEST(FlushReload, ElsePathShowsThirteenLineStride) {
  Core core;
  std::mt19937_64 rng(4);
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  core.cache().flush_page(kPage);
  core.load(Address{0x7770B4}, line(12));
  EXPECT_EQ(flush_reload(core, kPage, rng).cached_lines, (std::vector<unsigned>{12, 25}));
}

TEST(FlushReload, FreshlyFlushedPageIsEmpty) {
  Core core;
  std::mt19937_64 rng(4);
  core.cache().flush_page(kPage);
  const auto r = flush_reload(core, kPage, rng);
  EXPECT_TRUE(r.cached_lines.empty());
  std::vector<unsigned> sorted = r.order;
  std::sort(sorted.begin(), sorted.end());
  for (unsigned i = 0; i < 64; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(FlushReload, SequentialTrainingReloadFakesAFootprint) {
  std::mt19937_64 rng(9);
  ReloadOptions sequential{false, Address{0x5550C4}};
  ReloadOptions shuffled{true, Address{0x5550C4}};
  Core a;
  Core b;
  const auto in_order = flush_reload(a, kPage, rng, sequential).cached_lines.size();
  const auto mixed = flush_reload(b, kPage, rng, shuffled).cached_lines.size();
  EXPECT_GE(in_order, 60u);
  EXPECT_LT(mixed, 5u);
}

TEST(DetectStride, PicksSupportedCandidate) {
  const std::vector<unsigned> lines{8, 16};
  const std::vector<int> c{7, 8, 13};
  const auto d = detect_stride(lines, c);
  EXPECT_EQ(d.detected, 8);
  EXPECT_FALSE(d.ambiguous);

  const std::vector<unsigned> lines2{3, 10};
  const std::vector<int> c2{7, 13};
  EXPECT_EQ(detect_stride(lines2, c2).detected, 7);
}

TEST(DetectStride, SingleLineIsNoStride) {
  const std::vector<unsigned> lines{5};
  const std::vector<int> c{7, 13};
  EXPECT_FALSE(detect_stride(lines, c).detected);
}

TEST(DetectStride, BothStridesAreAmbiguous) {
  const std::vector<unsigned> lines{3, 10, 20, 33};
  const std::vector<int> c{7, 13};
  const auto d = detect_stride(lines, c);
  EXPECT_TRUE(d.ambiguous);
}

TEST(DetectStride, PairsMustShareAPage) {
  const std::vector<unsigned> lines{60, 67};
  const std::vector<int> c{7};
  EXPECT_FALSE(detect_stride(lines, c).detected);
}

TEST(DetectStride, RejectsBadCandidates) {
  const std::vector<unsigned> lines{1};
  EXPECT_THROW(detect_stride(lines, std::vector<int>{4, 7}), std::invalid_argument);
  EXPECT_THROW(detect_stride(lines, std::vector<int>{7, 7}), std::invalid_argument);
}

TEST(DetectStride, AdjacentLineNoiseNeverFakesAStride) {
  const std::vector<std::vector<int>> candidate_sets{{7, 13}, {5, 9}, {11, 21}, {6, 8, 10}};
  std::mt19937_64 rng(21);
  for (const auto& cands : candidate_sets) {
    for (int trial = 0; trial < 50; ++trial) {
      const int stride = cands[rng() % cands.size()];
      Core core;
      core.set_next_line_noise(true);
      train(core, kIfIp, stride);
      core.cache().flush_page(kPage);
      const auto l = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(64 - stride));
      core.load(Address{0x1230A0}, line(l) + static_cast<std::int64_t>(rng() % 64));
      const auto reload = flush_reload(core, kPage, rng);
      const auto d = detect_stride(reload.cached_lines, cands);
      ASSERT_EQ(d.detected, stride) << "line " << l;
      ASSERT_FALSE(d.ambiguous);
    }
  }
}

TEST(StatusProbe, IfPathKillsOnlyTheIfEntry) {
  Core core;
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  core.load(Address{0x8880A0}, line(40) + 12);
  const std::vector<TrainedProbe> probes{{kIfIp, line(21), 448}, {kElseIp, line(39), 832}};
  EXPECT_EQ(prefetcher_status_probe(core, probes), (std::vector<bool>{false, true}));
}

TEST(StatusProbe, IdleVictimLeavesBothAlive) {
  Core core;
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  const std::vector<TrainedProbe> probes{{kIfIp, line(21), 448}, {kElseIp, line(39), 832}};
  EXPECT_EQ(prefetcher_status_probe(core, probes), (std::vector<bool>{true, true}));
}

TEST(StatusProbe, ResetPrefetcherLooksLikeBothPaths) {
  Core core;
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  core.clear_prefetcher();
  const std::vector<TrainedProbe> probes{{kIfIp, line(21), 448}, {kElseIp, line(39), 832}};
  EXPECT_EQ(prefetcher_status_probe(core, probes), (std::vector<bool>{false, false}));
}

TEST(ObserverNeutrality, MeasuringWithoutVictimKeepsTable) {
  Core core;
  train(core, kIfIp, 7);
  train(core, kElseIp, 13);
  const auto before = state_hash(core.prefetcher());
  std::mt19937_64 rng(3);
  const auto sets = eviction_sets_for_page(core.cache().config(), kPage, 0x400000, rng);
  for (int i = 0; i < 5; ++i) {
    const auto primed = prime(core.cache(), sets);
    probe(core.cache(), sets, primed);
    flush_reload(core, kPage, rng);
  }
  EXPECT_EQ(state_hash(core.prefetcher()), before);
}
