// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <afterimage.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

using namespace afterimage;

namespace {

struct Verdict {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Verdict oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t mismatches = 0;
  std::uint64_t loads = 0;
  std::string first;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto rep = run_oracle_equivalence(100000, seed);
    mismatches += rep.mismatches;
    loads += rep.loads;
    if (first.empty()) first = rep.first_mismatch;
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 5.0,
          "10 seeds x 100000 sequences, " + std::to_string(loads) + " loads, " + std::to_string(mismatches) +
              " mismatches, " + format_fixed(t, 2) + " s" + (first.empty() ? "" : ", first: " + first)};
}

Verdict indexing() {
  const auto r = rev_indexing();
  std::size_t wrong = 0;
  for (std::size_t o = 0; o < r.triggered.size(); ++o) wrong += r.triggered[o] != (o == r.trained_ip.ip_tag());
  return {wrong == 0 && r.triggered.size() == 256, std::to_string(wrong) + " of 256 offsets disagree"};
}

Verdict conf_stride() {
  const auto rnd = rev_conf_stride(7, 5, 4, 3, OffsetMode::random);
  const auto eq = rev_conf_stride(7, 5, 4, 3, OffsetMode::equals_st2);
  auto str = [](const std::vector<Trigger>& v) {
    std::string s;
    for (const auto t : v) s += std::string(s.empty() ? "" : ",") + to_string(t);
    return s;
  };
  const bool ok = rnd.phase2 == std::vector<Trigger>{Trigger::first_stride, Trigger::none, Trigger::second_stride} &&
                  eq.phase2 == std::vector<Trigger>{Trigger::first_stride, Trigger::second_stride, Trigger::second_stride};
  return {ok, "random [" + str(rnd.phase2) + "], equals_st2 [" + str(eq.phase2) + "]"};
}

Verdict page_table() {
  std::string recl;
  std::string lock;
  bool ok = true;
  for (std::uint64_t off = 1; off <= 4; ++off) {
    const auto r = rev_page(off, PagePool::reclaimed);
    const auto l = rev_page(off, PagePool::locked);
    recl += r.triggered() ? "Y" : "N";
    lock += l.triggered() ? "Y" : "N";
    ok = ok && r.triggered() && l.triggered() == (off == 1);
  }
  const auto cold = rev_page(1, PagePool::locked);
  ok = ok && !cold.first_access && cold.second_access;
  return {ok, "reclaimed " + recl + ", locked " + lock + ", locked+1 first/second access " +
                  (cold.first_access ? "Y" : "N") + (cold.second_access ? "Y" : "N")};
}

Verdict entries() {
  auto dead = [](std::size_t n) {
    std::vector<std::size_t> out;
    const auto alive = rev_entries(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (!alive[k]) out.push_back(k + 1);
    }
    return out;
  };
  const auto d24 = dead(24);
  const auto d26 = dead(26);
  const auto d30 = dead(30);
  const bool ok = d24.empty() && d26 == std::vector<std::size_t>{1, 2} &&
                  d30 == std::vector<std::size_t>{1, 2, 3, 4, 5, 6};
  return {ok, "dead counts 24:" + std::to_string(d24.size()) + " 26:" + std::to_string(d26.size()) +
                  " 30:" + std::to_string(d30.size())};
}

Verdict replacement() {
  const auto ev = rev_replacement(8, 8);
  std::string s;
  for (const auto p : ev) s += (s.empty() ? "" : ",") + std::to_string(p);
  return {ev == std::vector<std::size_t>{9, 10, 11, 12, 13, 14, 15, 16}, "evicted positions " + s};
}

struct Pair {
  int variant;
  Channel channel;
};
const Pair kPairs[] = {{1, Channel::prime_probe},
                       {1, Channel::flush_reload},
                       {1, Channel::status_probe},
                       {2, Channel::flush_reload},
                       {3, Channel::flush_reload}};

AttackConfig attack_config(const Pair& p, std::uint64_t seed) {
  AttackConfig c;
  c.variant = p.variant;
  c.channel = p.channel;
  c.rounds = 200;
  c.seed = seed;
  c.noise.seed = seed;
  return c;
}

Verdict attack_success() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string detail;
  for (const auto& p : kPairs) {
    double last = 2.0;
    std::string curve;
    for (const double pe : {0.0, 0.005, 0.01, 0.02}) {
      auto c = attack_config(p, 2024);
      c.noise.p_evict = pe;
      const double rate = run_attack(c).success_rate();
      if (pe == 0.0 && rate != 1.0) ok = false;
      if (pe == 0.01 && rate < 0.90) ok = false;
      if (rate > last) ok = false;
      last = rate;
      curve += (curve.empty() ? "" : "/") + format_fixed(rate, 3);
    }
    detail += "v" + std::to_string(p.variant) + " " + to_string(p.channel) + " " + curve + "; ";
  }
  const double t = seconds_since(t0);
  ok = ok && t < 30.0;
  return {ok, detail + format_fixed(t, 2) + " s"};
}

Verdict mitigation_blocks() {
  bool ok = true;
  std::string detail;
  for (const int v : {2, 3}) {
    auto c = attack_config({v, Channel::flush_reload}, 2024);
    c.flush_policy = FlushPolicy::on_switch();
    const double searched = run_attack(c).success_rate();
    c.search_kernel_ip = false;
    const double known = run_attack(c).success_rate();
    ok = ok && searched <= 0.05 && known <= 0.05;
    detail += "v" + std::to_string(v) + " " + format_fixed(std::max(searched, known), 3) + " ";
  }
  return {ok, detail};
}

Verdict mitigation_overhead() {
  MitigationConfig mc;
  mc.flush_period_cycles = microseconds_to_cycles(10.0);
  mc.write_ports = 1;
  const auto rep = mitigation_eval(synthetic_strided_trace({}), mc);
  const bool ok = rep.coverage_delta <= 0.02 && rep.reset_cycles_per_flush == 24 && rep.flushes > 0 &&
                  rep.reset_cycles_total == rep.flushes * 24;
  return {ok, "coverage " + format_fixed(rep.coverage_no_flush) + " -> " + format_fixed(rep.coverage) + ", delta " +
                  format_fixed(rep.coverage_delta) + ", " + std::to_string(rep.flushes) + " flushes x " +
                  std::to_string(rep.reset_cycles_per_flush) + " cycles"};
}

Verdict observer_neutrality() {
  std::size_t violations = 0;
  std::size_t runs = 0;
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Core core;
    const Address page = page_address(0x3000 + static_cast<std::uint64_t>(trial));
    for (int k = 0; k < 24; ++k) {
      for (int i = 0; i < 3; ++i) {
        core.load(Address{0x400000 + static_cast<std::uint64_t>(k) * 0x100 + static_cast<std::uint64_t>(k)},
                  page + static_cast<std::int64_t>((rng() % 64) * 64));
      }
    }
    const auto sets = eviction_sets_for_page(core.cache().config(), page, 0x400000, rng);
    const auto before = state_hash(core.prefetcher());
    const auto primed = prime(core.cache(), sets);
    probe(core.cache(), sets, primed);
    violations += state_hash(core.prefetcher()) != before;
    flush_reload(core, page, rng);
    violations += state_hash(core.prefetcher()) != before;
    runs += 2;
  }
  return {violations == 0, std::to_string(runs) + " observations, " + std::to_string(violations) + " changed the table"};
}

Verdict status_channel() {
  auto c = attack_config({1, Channel::status_probe}, 2024);
  const auto o = run_attack(c);
  std::size_t if_rounds = 0;
  std::size_t good = 0;
  for (const auto& r : o.rounds) {
    const bool if_dead = std::find(r.observed.begin(), r.observed.end(), 0u) != r.observed.end();
    const bool else_dead = std::find(r.observed.begin(), r.observed.end(), 1u) != r.observed.end();
    if (r.truth) {
      ++if_rounds;
      good += if_dead && !else_dead;
    }
  }
  return {if_rounds > 0 && good == if_rounds && o.success_rate() == 1.0,
          std::to_string(good) + "/" + std::to_string(if_rounds) + " if-path rounds, overall " +
              format_fixed(o.success_rate(), 3)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"prefetcher matches reference transcription", oracle_equivalence},
      {"indexing uses low 8 IP bits", indexing},
      {"confidence/stride update sequence", conf_stride},
      {"page-crossing table", page_table},
      {"table holds 24 entries", entries},
      {"replacement evicts positions 9-16", replacement},
      {"attack success and noise sweep", attack_success},
      {"clear-on-switch blocks variants 2 and 3", mitigation_blocks},
      {"periodic flush overhead proxy", mitigation_overhead},
      {"observer neutrality", observer_neutrality},
      {"prefetcher-status channel", status_channel},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v{false, "exception"};
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.detail = std::string("exception: ") + e.what();
    }
    failed += !v.pass;
    std::printf("%s criterion %zu: %s (%s)\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str());
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
