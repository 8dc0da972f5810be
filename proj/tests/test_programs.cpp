#include <afterimage/csv.hpp>
#include <afterimage/programs.hpp>

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace afterimage;

namespace {

Machine one_domain_machine(int id = 0) {
  Machine m;
  m.add_domain(Domain(id, DomainKind::user_process, 0));
  return m;
}

const PrefetcherEntry* entry(Machine& m, std::uint8_t tag) {
  const auto slot = m.core().prefetcher().lookup(tag);
  return slot ? &m.core().prefetcher().entry(*slot) : nullptr;
}

}  // namespace

TEST(Gadget, TrainsBothTagsAboveThreshold) {
  const auto g = build_gadget(0xA0, 0xB4, 7 * 64, 13 * 64, 3);
  EXPECT_TRUE(g.distinguishable);
  EXPECT_EQ(g.if_ip.ip_tag(), 0xA0);
  EXPECT_EQ(g.else_ip.ip_tag(), 0xB4);
  Machine m = one_domain_machine();
  run_schedule({{{0, g.program}}, {}}, m);
  ASSERT_TRUE(entry(m, 0xA0));
  ASSERT_TRUE(entry(m, 0xB4));
  EXPECT_GE(entry(m, 0xA0)->confidence, 2);
  EXPECT_GE(entry(m, 0xB4)->confidence, 2);
  EXPECT_EQ(entry(m, 0xA0)->stride, 448);
  EXPECT_EQ(entry(m, 0xB4)->stride, 832);
}

TEST(Gadget, TwoIterationsStopAtConfidenceOne) {
  const auto g = build_gadget(0xA0, 0xB4, 7 * 64, 13 * 64, 2);
  Machine m = one_domain_machine();
  run_schedule({{{0, g.program}}, {}}, m);
  EXPECT_EQ(entry(m, 0xA0)->confidence, 1);
  EXPECT_EQ(entry(m, 0xB4)->confidence, 1);
}

TEST(Gadget, EqualStridesAreFlagged) {
  EXPECT_FALSE(build_gadget(0xA0, 0xB4, 448, 448, 3).distinguishable);
}

TEST(Gadget, RejectsBadArguments) {
  EXPECT_THROW(build_gadget(0xA0, 0xB4, 4096, 832, 3), std::out_of_range);
  EXPECT_THROW(build_gadget(0xA0, 0xB4, 2048, 832, 3), std::out_of_range);
  EXPECT_THROW(build_gadget(0xA0, 0xB4, 4 * 64, 832, 3), std::invalid_argument);
  EXPECT_THROW(build_gadget(0xA0, 0xA0, 448, 832, 3), std::invalid_argument);
  EXPECT_THROW(build_gadget(0xA0, 0xB4, 448, 832, 0), std::invalid_argument);
}

TEST(Gadget, OneMatchingLoadInAnotherDomainFiresOnce) {
  const auto g = build_gadget(0xA0, 0xB4, 7 * 64, 13 * 64, 3);
  Machine m;
  // Both address spaces see the array at the same physical frame.
  m.add_domain(Domain(0, DomainKind::user_process, 0x100));
  m.add_domain(Domain(1, DomainKind::kernel, 0x100));
  Program victim;
  victim.load(Address{0x5550A0}, GadgetLayout{}.array_base + 40 * 64);
  const auto log = run_schedule({{{0, g.program}, {1, victim}}, {}}, m);
  const auto prefetches = log.of_kind(EventKind::prefetch);
  ASSERT_FALSE(prefetches.empty());
  EXPECT_EQ(prefetches.back()->domain, 1);
  const Address victim_pa = m.domain(1).translate(GadgetLayout{}.array_base + 40 * 64);
  EXPECT_EQ(prefetches.back()->paddr, victim_pa + 448);
  std::size_t in_victim = 0;
  for (const auto* e : prefetches) in_victim += e->domain == 1;
  EXPECT_EQ(in_victim, 1u);
}

TEST(Victim, SecretBitSelectsPath) {
  const auto v = build_victim(SecretSource::from_value(0b1, 1), 0xA0, 0xB4, Address{0x10000000});
  Machine m = one_domain_machine();
  const auto log = run_schedule({{{0, v.program}}, {}}, m);
  const auto loads = log.of_kind(EventKind::load);
  ASSERT_EQ(loads.size(), 1u);
  EXPECT_EQ(loads[0]->ip.ip_tag(), 0xA0);
}

TEST(Victim, BitsRunLeastSignificantFirst) {
  const auto secret = SecretSource::from_value(0b10, 2);
  const auto v = build_victim(secret, 0xA0, 0xB4, Address{0x10000000});
  Machine m = one_domain_machine();
  const auto log = run_schedule({{{0, v.program}}, {}}, m);
  const auto loads = log.of_kind(EventKind::load);
  ASSERT_EQ(loads.size(), 2u);
  EXPECT_EQ(loads[0]->ip.ip_tag(), 0xB4);
  EXPECT_EQ(loads[1]->ip.ip_tag(), 0xA0);
  EXPECT_EQ(log.executed_paths(), secret.bits);
}

TEST(Victim, AccessesStayInsideArrayPage) {
  const auto v = build_victim(SecretSource::from_seed(500, 4), 0xA0, 0xB4, Address{0x10000000});
  for (const Address a : v.accessed) {
    EXPECT_EQ(a.page_frame(), Address{0x10000000}.page_frame());
    EXPECT_LT(a.line_in_page() + 13, kLinesPerPage);
  }
}

TEST(Kernel, TakenBranchLoadsInKernelDomain) {
  const Address shared{0xffff888000200000};
  const auto k = build_kernel_syscall(SecretSource::from_value(0b01, 2), shared);
  EXPECT_EQ(k.ip.ip_tag(), 0x30);
  Machine m;
  m.add_domain(Domain(0, DomainKind::kernel, 0x40000));
  const auto log = run_schedule({{{0, k.program}}, {}}, m);
  const auto loads = log.of_kind(EventKind::load);
  ASSERT_EQ(loads.size(), 1u);
  EXPECT_EQ(loads[0]->vaddr, k.accessed[0]);
  EXPECT_EQ(loads[0]->domain, 0);
}

TEST(IpMatching, GroupsCoverEveryTag) {
  const auto groups = ip_matching_groups(20, 24);
  std::size_t ips = 0;
  std::set<std::uint8_t> tags;
  for (const auto& g : groups) {
    EXPECT_EQ(std::set<std::uint8_t>(g.tags.begin(), g.tags.end()).size(), g.tags.size());
    std::set<std::uint64_t> pages;
    for (const auto& step : g.program.steps) pages.insert(std::get<LoadStep>(step.op).vaddr.page_frame());
    EXPECT_EQ(pages.size(), 24u);
    ips += g.ips.size();
    tags.insert(g.tags.begin(), g.tags.end());
  }
  EXPECT_EQ(ips, 480u);
  EXPECT_EQ(tags.size(), 256u);
  EXPECT_NO_THROW(ip_matching_groups(11, 24));
  EXPECT_THROW(ip_matching_groups(10, 24), std::invalid_argument);
}

TEST(Domains, SharedRegionAliasesPhysicalFrames) {
  Domain a(1, DomainKind::user_process, 0x100);
  Domain b(2, DomainKind::user_process, 0x200);
  share_region(a, Address{0x30000000}, b, Address{0x50000000}, 0x9000, 2);
  EXPECT_EQ(a.translate(Address{0x30001040}), b.translate(Address{0x50001040}));
  EXPECT_EQ(a.translate(Address{0x30001040}).page_frame(), 0x9001u);
  EXPECT_NE(a.translate(Address{0x7000}), b.translate(Address{0x7000}));
  EXPECT_THROW(a.map_page(0x1234, 0x9000), std::invalid_argument);
}

TEST(Schedules, EmptyScheduleLogsNothing) {
  Machine m = one_domain_machine();
  EXPECT_TRUE(run_schedule({}, m).events.empty());
}

TEST(Schedules, UnknownDomainIsRejected) {
  Machine m = one_domain_machine();
  EXPECT_THROW(run_schedule({{{7, Program{}}}, {}}, m), std::out_of_range);
  EXPECT_THROW(m.add_domain(Domain(0, DomainKind::kernel, 0)), std::invalid_argument);
}

namespace {

struct CrossProcess {
  Machine m;
  Address attacker_va{0x50000000};
  Address victim_va{0x30000000};

  CrossProcess() {
    Domain victim(1, DomainKind::user_process, 0x10000);
    Domain attacker(2, DomainKind::user_process, 0x20000);
    share_region(victim, victim_va, attacker, attacker_va, 0x90000, 1);
    m.add_domain(std::move(victim));
    m.add_domain(std::move(attacker));
  }

  EventLog run(FlushPolicy policy, std::int64_t victim_line) {
    Program train = build_training_load(Address{0x7f00A0}, 8 * 64, 3, attacker_va);
    train.flush(attacker_va, kLinesPerPage);
    Program victim;
    victim.load(Address{0x4010A0}, victim_va + victim_line * 64);
    return run_schedule({{{2, train}, {1, victim}}, policy}, m);
  }
};

}  // namespace

TEST(Schedules, CrossProcessFootprintShowsTrainedStride) {
  CrossProcess w;
  w.run(FlushPolicy::none(), 20);
  const Address page = w.m.domain(1).translate(w.victim_va);
  std::vector<unsigned> cached;
  for (unsigned l = 0; l < kLinesPerPage; ++l) {
    if (w.m.core().cache().contains(page + static_cast<std::int64_t>(l * 64))) cached.push_back(l);
  }
  EXPECT_EQ(cached, (std::vector<unsigned>{20, 28}));
  EXPECT_EQ(w.m.core().stats().cross_domain_triggers, 1u);
}

TEST(Schedules, ClearOnSwitchStopsVictimTrigger) {
  CrossProcess w;
  const auto log = w.run(FlushPolicy::on_switch(), 20);
  for (const auto* e : log.of_kind(EventKind::prefetch)) EXPECT_NE(e->domain, 1);
  EXPECT_FALSE(log.of_kind(EventKind::prefetcher_reset).empty());
  EXPECT_EQ(w.m.core().stats().cross_domain_triggers, 0u);
}

TEST(Schedules, SwitchWithoutPolicyKeepsTableIntact) {
  CrossProcess w;
  w.run(FlushPolicy::none(), 20);
  const PrefetchTable before = w.m.core().prefetcher();
  run_schedule({{{1, Program{}}, {2, Program{}}, {1, Program{}}}, {}}, w.m);
  EXPECT_EQ(w.m.core().prefetcher(), before);
}

TEST(EventLogExport, OneRowPerEventWithHexAddresses) {
  Machine m = one_domain_machine();
  Program p;
  p.load(Address{0x4010A0}, Address{0x10000040}).flush(Address{0x10000040});
  const auto log = run_schedule({{{0, p}}, {}}, m);
  const auto t = event_log_table(log);
  ASSERT_EQ(t.rows.size(), log.events.size());
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0][2], "switch");
  EXPECT_EQ(t.rows[1][2], "load");
  EXPECT_EQ(t.rows[1][3], "0x4010a0");
  EXPECT_EQ(t.rows[1][4], "0x10000040");
  EXPECT_EQ(t.rows[2][2], "flush");
}

TEST(EventLogExport, EmptyTableIsHeaderOnly) {
  std::ostringstream os;
  write_csv(event_log_table(EventLog{}), os);
  EXPECT_EQ(os.str(), "time,domain,kind,ip,vaddr,paddr,latency,bit_index,secret,label\n");
}
