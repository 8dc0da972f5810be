#pragma once

// Reverse-engineering microbenchmarks, the three attack variants and the
// clear-on-switch mitigation, all run against the simulated core.

#include <afterimage/core.hpp>
#include <afterimage/programs.hpp>
#include <afterimage/sidechannel.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace afterimage {

// Independent stream for (seed, stream, index); keeps rounds reproducible in isolation.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Reverse engineering

namespace reveng {

inline constexpr std::int64_t kStrideLines = 7;
inline constexpr std::uint64_t kProbeLine = 40;

inline Address line_at(std::uint64_t frame, std::int64_t line) {
  return page_address(frame) + line * static_cast<std::int64_t>(kLineSize);
}

// Loads at `at` with `ip` and reports whether `at + stride_lines` came in.
inline bool load_triggers(Core& core, Address ip, Address at, std::int64_t stride_lines) {
  const Address target = at + stride_lines * static_cast<std::int64_t>(kLineSize);
  core.flush(target);
  core.load(ip, at);
  return core.cache().config().is_hit(core.probe(target));
}

}  // namespace reveng

// Trains `trained_ip` with a 7-line stride, then loads once with `probe_ip` and checks
// whether the stride was applied.
inline bool ip_triggers(Address trained_ip, Address probe_ip) {
  Core core;
  const std::uint64_t frame = 0x1000;
  for (std::int64_t i = 0; i < 4; ++i) core.load(trained_ip, reveng::line_at(frame, i * reveng::kStrideLines));
  return reveng::load_triggers(core, probe_ip, reveng::line_at(frame, reveng::kProbeLine), reveng::kStrideLines);
}

struct IndexingResult {
  Address trained_ip{};
  std::vector<bool> triggered;  // by low byte of the probing IP
};

inline IndexingResult rev_indexing(Address trained_ip = Address{0x4010A0}) {
  IndexingResult r{trained_ip, {}};
  for (std::uint64_t low = 0; low < 256; ++low) {
    r.triggered.push_back(ip_triggers(trained_ip, Address{0x7ff0b000ull | low}));
  }
  return r;
}

enum class Trigger { none, first_stride, second_stride, both };

inline const char* to_string(Trigger t) {
  switch (t) {
    case Trigger::none: return "none";
    case Trigger::first_stride: return "st1";
    case Trigger::second_stride: return "st2";
    case Trigger::both: return "both";
  }
  return "?";
}

enum class OffsetMode { random, equals_st2 };

struct ConfStrideResult {
  std::vector<Trigger> phase1;
  std::vector<Trigger> phase2;
  std::int64_t phase2_start_line = 0;
};

// Two training phases on one IP. Strides and offsets are in lines. In equals_st2 mode
// the second phase starts one st2 after the last first-phase access; a random start
// never continues either stride.
inline ConfStrideResult rev_conf_stride(std::int64_t st1, std::int64_t st2, std::size_t tr1, std::size_t tr2,
                                        OffsetMode mode, std::uint64_t seed = 1) {
  if (st1 <= 0 || st2 <= 0 || tr1 == 0 || tr2 == 0) throw std::invalid_argument("strides and counts must be positive");
  const auto last1 = static_cast<std::int64_t>(tr1 - 1) * st1;
  const std::int64_t span2 = static_cast<std::int64_t>(tr2 - 1) * st2 + std::max(st1, st2);
  const std::int64_t lines = static_cast<std::int64_t>(kLinesPerPage);
  if (last1 + st1 >= lines) throw std::invalid_argument("first phase does not fit in one page");

  std::int64_t start = 0;
  if (mode == OffsetMode::equals_st2) {
    start = last1 + st2;
  } else {
    std::vector<std::int64_t> choices;
    for (std::int64_t s = 0; s + span2 < lines; ++s) {
      if (s - last1 != st1 && s - last1 != st2) choices.push_back(s);
    }
    if (choices.empty()) throw std::invalid_argument("no room for a random second-phase offset");
    auto rng = derived_rng(seed, 0xC5);
    start = choices[rng() % choices.size()];
  }
  if (start + span2 >= lines) throw std::invalid_argument("second phase does not fit in one page");

  Core core;
  const std::uint64_t frame = 0x2000;
  const Address ip{0x4011C8};
  auto step = [&](std::int64_t line) {
    const Address at = reveng::line_at(frame, line);
    const Address t1 = at + st1 * static_cast<std::int64_t>(kLineSize);
    const Address t2 = at + st2 * static_cast<std::int64_t>(kLineSize);
    core.flush(t1);
    core.flush(t2);
    core.load(ip, at);
    const bool a = core.cache().config().is_hit(core.probe(t1));
    const bool b = st1 != st2 && core.cache().config().is_hit(core.probe(t2));
    return a && b ? Trigger::both : a ? Trigger::first_stride : b ? Trigger::second_stride : Trigger::none;
  };

  ConfStrideResult r;
  r.phase2_start_line = start;
  for (std::size_t i = 0; i < tr1; ++i) r.phase1.push_back(step(static_cast<std::int64_t>(i) * st1));
  core.cache().flush_page(page_address(frame));
  for (std::size_t i = 0; i < tr2; ++i) r.phase2.push_back(step(start + static_cast<std::int64_t>(i) * st2));
  return r;
}

enum class PagePool { reclaimed, locked };

struct PageTrigger {
  bool first_access = false;
  bool second_access = false;
  bool triggered() const { return first_access || second_access; }
};

// Trains on one page, then loads twice on the page `offset_pages` further on. A
// reclaimed pool maps that logical page to the training frame; a locked pool gives it
// its own frame.
inline PageTrigger rev_page(std::uint64_t offset_pages, PagePool pool) {
  if (offset_pages == 0) throw std::invalid_argument("page offset must be at least 1");
  Core core;
  const std::uint64_t train_frame = pool == PagePool::reclaimed ? 0x3000 : 0x5000;
  const std::uint64_t test_frame = pool == PagePool::reclaimed ? train_frame : train_frame + offset_pages;
  const Address ip{pool == PagePool::reclaimed ? 0x401311ull : 0x401322ull};
  for (std::int64_t i = 0; i < 4; ++i) core.load(ip, reveng::line_at(train_frame, i * reveng::kStrideLines));

  const Address at = reveng::line_at(test_frame, static_cast<std::int64_t>(reveng::kProbeLine));
  PageTrigger r;
  r.first_access = reveng::load_triggers(core, ip, at, reveng::kStrideLines);
  r.second_access = reveng::load_triggers(core, ip, at, reveng::kStrideLines);
  return r;
}

namespace reveng {

inline Address numbered_ip(std::size_t k) { return Address{0x402000 + k * 0x100 + (k & 0xFF)}; }
inline std::uint64_t numbered_frame(std::size_t k) { return 0x6000 + k; }

// Trains each IP in turn (5 loads, 7-line stride, own frame).
inline void train_in_order(Core& core, std::size_t first, std::size_t count) {
  for (std::size_t k = first; k < first + count; ++k) {
    for (std::int64_t i = 0; i < 5; ++i) core.load(numbered_ip(k), line_at(numbered_frame(k), i * kStrideLines));
  }
}

// Each IP is checked against its own copy of the core, so checking one cannot evict another.
inline std::vector<bool> still_trigger(const Core& trained, std::size_t count) {
  std::vector<bool> alive;
  for (std::size_t k = 0; k < count; ++k) {
    Core copy = trained;
    alive.push_back(load_triggers(copy, numbered_ip(k), line_at(numbered_frame(k), kProbeLine), kStrideLines));
  }
  return alive;
}

}  // namespace reveng

// Trigger bitmap after training `n_ips` distinct IPs in order.
inline std::vector<bool> rev_entries(std::size_t n_ips) {
  if (n_ips > 256) throw std::invalid_argument("at most 256 distinct IP tags");
  Core core;
  reveng::train_in_order(core, 0, n_ips);
  return reveng::still_trigger(core, n_ips);
}

// Fills the table with 24 IPs, retrains the first `retrain`, adds `fresh` new IPs and
// returns the 1-based positions that no longer trigger.
inline std::vector<std::size_t> rev_replacement(std::size_t retrain = 8, std::size_t fresh = 8) {
  if (retrain > kPrefetcherEntries || kPrefetcherEntries + fresh > 256) {
    throw std::invalid_argument("replacement experiment parameters out of range");
  }
  Core core;
  reveng::train_in_order(core, 0, kPrefetcherEntries);
  core.cache().clear();
  reveng::train_in_order(core, 0, retrain);
  reveng::train_in_order(core, kPrefetcherEntries, fresh);
  core.cache().clear();
  const auto alive = reveng::still_trigger(core, kPrefetcherEntries + fresh);
  std::vector<std::size_t> evicted;
  for (std::size_t k = 0; k < alive.size(); ++k) {
    if (!alive[k]) evicted.push_back(k + 1);
  }
  return evicted;
}

// ---------------------------------------------------------------------------
// Attacks

struct NoiseModel {
  double p_evict = 0.0;       // per observed line / eviction set, per round
  double p_extra_load = 0.0;  // per round: one unrelated line of the page gets cached
  bool next_line_noise = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p_evict >= 0.0 && p_evict <= 1.0) || !(p_extra_load >= 0.0 && p_extra_load <= 1.0)) {
      throw std::invalid_argument("noise probabilities must lie in [0, 1]");
    }
  }
};

enum class Channel { prime_probe, flush_reload, status_probe };

inline const char* to_string(Channel c) {
  switch (c) {
    case Channel::prime_probe: return "prime_probe";
    case Channel::flush_reload: return "flush_reload";
    case Channel::status_probe: return "status_probe";
  }
  return "?";
}

inline std::optional<Channel> parse_channel(std::string_view s) {
  if (s == "prime_probe") return Channel::prime_probe;
  if (s == "flush_reload") return Channel::flush_reload;
  if (s == "status_probe") return Channel::status_probe;
  return std::nullopt;
}

class UnsupportedAttack : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Empty when the pair is supported, otherwise why not.
inline std::string unsupported_reason(int variant, Channel channel) {
  if (variant < 1 || variant > 3) return "variant must be 1, 2 or 3";
  if (variant == 1) return {};
  if (channel == Channel::flush_reload) return {};
  if (channel == Channel::prime_probe) {
    return "variant " + std::to_string(variant) +
           " does not support prime_probe: context and privilege switches touch most eviction sets";
  }
  return "variant " + std::to_string(variant) + " does not support status_probe: only variant 1 offers it";
}

struct AttackConfig {
  int variant = 1;
  Channel channel = Channel::flush_reload;
  std::size_t rounds = 200;
  std::uint64_t seed = 1;
  NoiseModel noise;
  FlushPolicy flush_policy;
  CacheConfig cache;
  std::size_t tlb_capacity = 64;

  std::uint8_t if_tag = 0xA0;
  std::uint8_t else_tag = 0xB4;
  std::int32_t stride_if_lines = 7;
  std::int32_t stride_else_lines = 13;
  std::size_t gadget_iterations = 3;

  std::uint8_t kernel_tag = 0x30;
  std::int32_t kernel_stride_lines = 11;
  bool search_kernel_ip = true;  // false: the attacker already knows the kernel's tag
  std::size_t search_groups = 20;
  std::size_t search_group_size = 24;
  std::size_t search_attempts = 16;
};

enum class Inference { zero, one, ambiguous };

inline const char* to_string(Inference i) {
  switch (i) {
    case Inference::zero: return "0";
    case Inference::one: return "1";
    case Inference::ambiguous: return "ambiguous";
  }
  return "?";
}

struct RoundOutcome {
  std::size_t round = 0;
  bool truth = false;
  std::optional<int> detected_stride;  // lines
  Inference inferred = Inference::ambiguous;
  bool success = false;
  std::vector<unsigned> observed;  // cached lines, evicted sets, or non-triggering tags
  std::vector<std::int64_t> timing_delta;
  std::vector<std::uint32_t> timing;
  Phase phase = Phase::reload;
};

struct AttackOutcome {
  int variant = 1;
  Channel channel = Channel::flush_reload;
  std::vector<RoundOutcome> rounds;
  std::optional<std::uint8_t> matched_kernel_tag;
  std::size_t search_configurations = 0;
  std::uint64_t cross_domain_triggers = 0;

  std::size_t successes() const {
    return static_cast<std::size_t>(std::count_if(rounds.begin(), rounds.end(), [](const auto& r) { return r.success; }));
  }
  double success_rate() const {
    return rounds.empty() ? 0.0 : static_cast<double>(successes()) / static_cast<double>(rounds.size());
  }
};

namespace attack {

inline constexpr int kKernel = 0;
inline constexpr int kVictim = 1;
inline constexpr int kAttacker = 2;

inline const Address kVictimArray{0x10000000};         // variant 1, victim's own page
inline const Address kVictimShared{0x30000000};        // victim's view of the shared page
inline const Address kAttackerShared{0x50000000};      // attacker's view of the shared page
inline const Address kKernelShared{0xffff888000200000};  // kernel's view of the shared page
inline const Address kAttackerKernelShared{0x60000000};  // attacker's view of the kernel-shared page
inline constexpr std::uint64_t kSharedFrame = 0x90000;
inline constexpr std::uint64_t kKernelSharedFrame = 0xA0000;
inline constexpr std::uint64_t kEvictionPoolFrame = 0x400000;

inline Machine make_machine(const AttackConfig& cfg) {
  Core core(cfg.cache, cfg.tlb_capacity);
  core.set_next_line_noise(cfg.noise.next_line_noise);
  Machine m(std::move(core));
  Domain kernel(kKernel, DomainKind::kernel, 0x40000);
  Domain victim(kVictim, DomainKind::user_process, 0x10000);
  Domain attacker(kAttacker, DomainKind::user_process, 0x20000);
  share_region(victim, kVictimShared, attacker, kAttackerShared, kSharedFrame, 1);
  share_region(kernel, kKernelShared, attacker, kAttackerKernelShared, kKernelSharedFrame, 1);
  m.add_domain(std::move(kernel));
  m.add_domain(std::move(victim));
  m.add_domain(std::move(attacker));
  return m;
}

inline Address kernel_shared_for_attacker() { return kAttackerKernelShared; }

struct NoiseDraws {
  std::vector<double> evict;  // one per observed target
  double extra = 1.0;
  unsigned extra_line = 0;
};

// Drawn whether or not the probabilities are zero so that sweeps over p stay coupled.
inline NoiseDraws draw_noise(const NoiseModel& noise, std::size_t round, std::size_t targets) {
  auto rng = derived_rng(noise.seed, 0x401, round);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  NoiseDraws d;
  for (std::size_t i = 0; i < targets; ++i) d.evict.push_back(u(rng));
  d.extra = u(rng);
  d.extra_line = static_cast<unsigned>(rng() % kLinesPerPage);
  return d;
}

inline Inference infer_two_path(const StrideDetection& det, int stride_if, int stride_else) {
  if (!det.detected || det.ambiguous) return Inference::ambiguous;
  if (*det.detected == stride_if) return Inference::one;
  if (*det.detected == stride_else) return Inference::zero;
  return Inference::ambiguous;
}

inline bool scored(Inference inferred, bool truth) {
  return (inferred == Inference::one && truth) || (inferred == Inference::zero && !truth);
}

// Walks the 20x24 IP groups, shifting each group so a different member trains on the
// shared page, until a syscall leaves the expected strided footprint there.
inline std::optional<Address> search_kernel_ip(Machine& m, const AttackConfig& cfg, const KernelLayout& kernel_layout,
                                               std::size_t& configurations) {
  const std::int32_t stride = cfg.kernel_stride_lines * static_cast<std::int32_t>(kLineSize);
  const Address shared = kernel_shared_for_attacker();
  const Address shared_phys = m.domain(kAttacker).translate(shared);
  const std::vector<int> candidates{cfg.kernel_stride_lines};
  const SecretSource search_bits =
      SecretSource::from_seed(cfg.search_groups * cfg.search_group_size * cfg.search_attempts, cfg.seed ^ 0x5EA4C4);
  KernelLayout layout = kernel_layout;
  layout.seed = cfg.seed ^ 0x6E7;
  const KernelSyscall syscalls = build_kernel_syscall(search_bits, kKernelShared, layout);
  std::size_t invocation = 0;

  for (std::size_t g = 0; g < cfg.search_groups; ++g) {
    for (std::size_t shift = 0; shift < cfg.search_group_size; ++shift) {
      ++configurations;
      IpMatchingLayout il;
      il.stride = stride;
      il.first_page = shared + -static_cast<std::int64_t>(shift * kPageSize);
      const auto groups = ip_matching_groups(cfg.search_groups, cfg.search_group_size, il);
      const IpMatchingGroup& group = groups[g];
      bool found = false;
      Schedule train{{{kAttacker, group.program}}, cfg.flush_policy};
      run_schedule(train, m);
      for (std::size_t attempt = 0; attempt < cfg.search_attempts && !found; ++attempt) {
        Program flush;
        flush.flush(shared, kLinesPerPage);
        Program observe;
        observe.observe("search", [&](ObserveContext& ctx) {
          std::mt19937_64 rng = derived_rng(cfg.seed, 0x5EA, invocation);
          const auto reload = flush_reload(ctx.machine.core(), shared_phys, rng);
          found = detect_stride(reload.cached_lines, candidates).detected.has_value();
        });
        Schedule s{{{kAttacker, flush},
                    {kKernel, syscalls.program.slice(invocation % syscalls.program.size(), 1)},
                    {kAttacker, observe}},
                   cfg.flush_policy};
        ++invocation;
        run_schedule(s, m);
      }
      if (found) return group.ips[shift];
    }
  }
  return std::nullopt;
}

}  // namespace attack

// Runs `rounds` rounds of train -> flush -> victim -> observe and scores each against
// the victim's secret bit.
inline AttackOutcome run_attack(const AttackConfig& cfg) {
  if (const auto why = unsupported_reason(cfg.variant, cfg.channel); !why.empty()) throw UnsupportedAttack(why);
  cfg.noise.validate();
  cfg.cache.validate();
  using namespace attack;

  AttackOutcome out;
  out.variant = cfg.variant;
  out.channel = cfg.channel;
  Machine m = make_machine(cfg);
  const CacheConfig& cc = m.core().cache().config();
  const auto line = static_cast<std::int32_t>(kLineSize);

  // Page-granular ASLR: moves code around but keeps the low 12 bits of every IP.
  auto aslr = derived_rng(cfg.seed, 0xA51);
  const auto user_shift = static_cast<std::int64_t>((aslr() % 0x1000) * kPageSize);
  const auto kernel_shift = static_cast<std::int64_t>((aslr() % 0x1000) * kPageSize);

  const SecretSource secret = SecretSource::from_seed(cfg.rounds, derived_rng(cfg.seed, 0x5EC)());
  VictimLayout vl;
  vl.ip_base = vl.ip_base + user_shift;
  vl.seed = derived_rng(cfg.seed, 0x71C)();
  KernelLayout kl;
  kl.ip = ip_with_tag(kl.ip + kernel_shift, cfg.kernel_tag);
  kl.seed = derived_rng(cfg.seed, 0x4E1)();

  const std::vector<int> two_paths{cfg.stride_if_lines, cfg.stride_else_lines};
  const std::vector<int> kernel_path{cfg.kernel_stride_lines};

  if (cfg.variant == 1 || cfg.variant == 2) {
    const bool v1 = cfg.variant == 1;
    const int gadget_domain = v1 ? kVictim : kAttacker;
    const Address gadget_array = v1 ? kVictimArray : kAttackerShared;
    const Address victim_array = v1 ? kVictimArray : kVictimShared;
    const Address observed_page = m.domain(kVictim).translate(victim_array);

    GadgetLayout gl;
    gl.array_base = gadget_array;
    gl.ip_base = gl.ip_base + user_shift;
    const Gadget gadget = build_gadget(cfg.if_tag, cfg.else_tag, cfg.stride_if_lines * line,
                                       cfg.stride_else_lines * line, cfg.gadget_iterations, gl);
    const Victim victim = build_victim(secret, cfg.if_tag, cfg.else_tag, victim_array, vl);

    auto mes_rng = derived_rng(cfg.seed, 0xE5);
    std::vector<ChasedEvictionSet> sets;
    TimingVector primed;
    if (cfg.channel == Channel::prime_probe) sets = eviction_sets_for_page(cc, observed_page, kEvictionPoolFrame, mes_rng);

    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      RoundOutcome ro;
      ro.round = r;
      ro.truth = secret.bits[r];
      const NoiseDraws nd = draw_noise(cfg.noise, r, kLinesPerPage);
      std::mt19937_64 reload_rng = derived_rng(cfg.seed, 0xF2, r);

      Program train = gadget.program;
      Program before_victim;
      Program after_victim;
      switch (cfg.channel) {
        case Channel::flush_reload:
          train.flush(gadget_array, kLinesPerPage);
          after_victim.observe("flush_reload", [&](ObserveContext& ctx) {
            Core& core = ctx.machine.core();
            for (unsigned l = 0; l < kLinesPerPage; ++l) {
              if (nd.evict[l] < cfg.noise.p_evict) core.flush(observed_page + static_cast<std::int64_t>(l * kLineSize));
            }
            if (nd.extra < cfg.noise.p_extra_load) {
              core.cache().install(observed_page + static_cast<std::int64_t>(nd.extra_line * kLineSize));
            }
            const auto reload = flush_reload(core, observed_page, reload_rng);
            const auto det = detect_stride(reload.cached_lines, two_paths);
            ro.observed = reload.cached_lines;
            ro.timing = reload.timings.latency;
            ro.phase = Phase::reload;
            ro.detected_stride = det.detected;
            ro.inferred = infer_two_path(det, cfg.stride_if_lines, cfg.stride_else_lines);
          });
          break;
        case Channel::prime_probe:
          before_victim.observe("prime", [&](ObserveContext& ctx) { primed = prime(ctx.machine.core().cache(), sets); });
          after_victim.observe("probe", [&](ObserveContext& ctx) {
            Cache& cache = ctx.machine.core().cache();
            for (std::size_t i = 0; i < sets.size(); ++i) {
              if (nd.evict[i] < cfg.noise.p_evict) cache.flush_line(sets[i].mes.members.front());
            }
            if (nd.extra < cfg.noise.p_extra_load) cache.flush_line(sets[nd.extra_line].mes.members.front());
            const auto map = probe(cache, sets, primed);
            const auto evicted = map.evicted_indices();
            const auto det = detect_stride(evicted, two_paths);
            ro.observed = evicted;
            ro.timing = map.timings.latency;
            ro.timing_delta = map.delta;
            ro.phase = Phase::probe;
            ro.detected_stride = det.detected;
            ro.inferred = infer_two_path(det, cfg.stride_if_lines, cfg.stride_else_lines);
          });
          break;
        case Channel::status_probe: {
          const Address base = m.domain(gadget_domain).translate(gadget_array);
          const auto iters = static_cast<std::int64_t>(cfg.gadget_iterations);
          const std::vector<TrainedProbe> probes{
              {gadget.if_ip, base + iters * cfg.stride_if_lines * line, cfg.stride_if_lines * line},
              {gadget.else_ip, base + iters * cfg.stride_else_lines * line, cfg.stride_else_lines * line}};
          after_victim.observe("status_probe", [&, probes](ObserveContext& ctx) {
            Core& core = ctx.machine.core();
            std::size_t k = 0;
            const auto alive = prefetcher_status_probe(core, probes, [&](Address target) {
              if (nd.evict[k++] < cfg.noise.p_evict) core.flush(target);
            });
            ro.phase = Phase::probe;
            for (unsigned t = 0; t < alive.size(); ++t) {
              if (!alive[t]) ro.observed.push_back(t);
            }
            if (!alive[0] && alive[1]) {
              ro.inferred = Inference::one;
              ro.detected_stride = cfg.stride_if_lines;
            } else if (alive[0] && !alive[1]) {
              ro.inferred = Inference::zero;
              ro.detected_stride = cfg.stride_else_lines;
            } else {
              ro.inferred = Inference::ambiguous;
            }
          });
          break;
        }
      }

      Schedule s;
      s.flush_policy = cfg.flush_policy;
      s.slices.push_back({gadget_domain, std::move(train)});
      if (!before_victim.empty()) s.slices.push_back({gadget_domain, std::move(before_victim)});
      s.slices.push_back({kVictim, victim.program.slice(r, 1)});
      s.slices.push_back({gadget_domain, std::move(after_victim)});
      run_schedule(s, m);
      ro.success = scored(ro.inferred, ro.truth);
      out.rounds.push_back(std::move(ro));
    }
  } else {
    const Address shared = kernel_shared_for_attacker();
    const Address shared_phys = m.domain(kAttacker).translate(shared);
    const std::int32_t stride = cfg.kernel_stride_lines * line;

    std::optional<Address> training_ip;
    if (cfg.search_kernel_ip) {
      training_ip = search_kernel_ip(m, cfg, kl, out.search_configurations);
    } else {
      training_ip = ip_with_tag(GadgetLayout{}.ip_base + user_shift, cfg.kernel_tag);
    }
    if (training_ip) out.matched_kernel_tag = training_ip->ip_tag();

    const KernelSyscall syscall = build_kernel_syscall(secret, kKernelShared, kl);
    const auto iters = static_cast<std::int64_t>(cfg.gadget_iterations);
    const TrainedProbe canary{training_ip.value_or(Address{}), shared_phys + iters * stride, stride};

    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      RoundOutcome ro;
      ro.round = r;
      ro.truth = secret.bits[r];
      ro.phase = Phase::reload;
      if (!training_ip) {
        out.rounds.push_back(std::move(ro));
        continue;
      }
      const NoiseDraws nd = draw_noise(cfg.noise, r, kLinesPerPage);
      std::mt19937_64 reload_rng = derived_rng(cfg.seed, 0xF3, r);

      Program train = build_training_load(*training_ip, stride, cfg.gadget_iterations, shared);
      train.flush(shared, kLinesPerPage);
      Program after;
      after.observe("flush_reload", [&](ObserveContext& ctx) {
        Core& core = ctx.machine.core();
        for (unsigned l = 0; l < kLinesPerPage; ++l) {
          if (nd.evict[l] < cfg.noise.p_evict) core.flush(shared_phys + static_cast<std::int64_t>(l * kLineSize));
        }
        if (nd.extra < cfg.noise.p_extra_load) {
          core.cache().install(shared_phys + static_cast<std::int64_t>(nd.extra_line * kLineSize));
        }
        const auto reload = flush_reload(core, shared_phys, reload_rng);
        const auto det = detect_stride(reload.cached_lines, kernel_path);
        ro.observed = reload.cached_lines;
        ro.timing = reload.timings.latency;
        ro.detected_stride = det.detected;
        if (det.detected) {
          ro.inferred = Inference::one;
        } else {
          // No footprint: only trust "not taken" if the trained entry is still intact.
          const TrainedProbe probes[] = {canary};
          ro.inferred = prefetcher_status_probe(core, probes)[0] ? Inference::zero : Inference::ambiguous;
        }
      });
      Schedule s{{{kAttacker, std::move(train)}, {kKernel, syscall.program.slice(r, 1)}, {kAttacker, std::move(after)}},
                 cfg.flush_policy};
      run_schedule(s, m);
      ro.success = scored(ro.inferred, ro.truth);
      out.rounds.push_back(std::move(ro));
    }
  }
  out.cross_domain_triggers = m.core().stats().cross_domain_triggers;
  return out;
}

// ---------------------------------------------------------------------------
// Mitigation

struct TraceRecord {
  Address ip{};
  Address vaddr{};
  int domain = 0;
};

struct SyntheticWorkload {
  std::size_t streams = 4;
  std::int32_t stride = 448;
  std::size_t loads = 72000;
};

inline std::vector<TraceRecord> synthetic_strided_trace(const SyntheticWorkload& w) {
  std::vector<TraceRecord> t;
  t.reserve(w.loads);
  for (std::size_t n = 0; n < w.loads; ++n) {
    const std::size_t s = n % w.streams;
    const auto step = static_cast<std::int64_t>(n / w.streams);
    const Address base{0x100000000ull + s * 0x10000000ull};
    t.push_back({Address{0x405000 + s * 0x40 + 0x0C}, base + step * w.stride, 0});
  }
  return t;
}

struct MitigationConfig {
  std::optional<std::uint64_t> flush_period_cycles;  // nullopt: never flush
  std::uint64_t write_ports = 1;
  std::uint64_t cycles_per_load = 10;
  CacheConfig cache;
  std::size_t tlb_capacity = 64;
};

struct MitigationReport {
  std::optional<std::uint64_t> flush_period_cycles;
  std::uint64_t write_ports = 1;
  std::uint64_t demand_loads = 0;
  std::uint64_t baseline_misses = 0;  // prefetcher off
  std::uint64_t prefetches_no_flush = 0;
  std::uint64_t useful_no_flush = 0;
  std::uint64_t prefetches_issued = 0;  // with flushing
  std::uint64_t useful_prefetches = 0;
  double coverage_no_flush = 0.0;
  double coverage = 0.0;
  double coverage_delta = 0.0;
  std::uint64_t flushes = 0;
  std::uint64_t reset_cycles_per_flush = 0;
  std::uint64_t reset_cycles_total = 0;
};

namespace detail {

inline CoreStats replay_trace(const std::vector<TraceRecord>& trace, const MitigationConfig& cfg,
                              FlushPolicy policy, bool prefetcher) {
  Core core(cfg.cache, cfg.tlb_capacity);
  core.set_prefetcher_enabled(prefetcher);
  core.set_flush_policy(policy);
  for (const auto& rec : trace) {
    core.switch_domain(rec.domain);
    // Each trace domain gets its own identity-plus-offset address space.
    const Address paddr = page_address(rec.vaddr.page_frame() + 0x1000000ull * static_cast<std::uint64_t>(rec.domain),
                                       rec.vaddr.page_offset());
    core.load(rec.ip, paddr);
    core.advance(cfg.cycles_per_load);
  }
  return core.stats();
}

}  // namespace detail

// Replays the workload without a prefetcher (baseline misses), with it, and with it
// flushed every period; coverage = useful prefetches / baseline misses.
inline MitigationReport mitigation_eval(const std::vector<TraceRecord>& trace, const MitigationConfig& cfg) {
  if (cfg.write_ports == 0) throw std::invalid_argument("write_ports must be at least 1");
  MitigationReport rep;
  rep.flush_period_cycles = cfg.flush_period_cycles;
  rep.write_ports = cfg.write_ports;
  rep.reset_cycles_per_flush = (kPrefetcherEntries + cfg.write_ports - 1) / cfg.write_ports;
  if (cfg.flush_period_cycles && *cfg.flush_period_cycles < rep.reset_cycles_per_flush) {
    throw std::invalid_argument("flush period shorter than the reset itself");
  }

  const CoreStats base = detail::replay_trace(trace, cfg, FlushPolicy::none(), false);
  const CoreStats plain = detail::replay_trace(trace, cfg, FlushPolicy::none(), true);
  const FlushPolicy policy = cfg.flush_period_cycles ? FlushPolicy::periodic(*cfg.flush_period_cycles, cfg.write_ports)
                                                     : FlushPolicy::none();
  const CoreStats flushed = detail::replay_trace(trace, cfg, policy, true);

  auto coverage = [&](const CoreStats& s) {
    return base.demand_misses == 0 ? 0.0
                                   : static_cast<double>(s.useful_prefetches) / static_cast<double>(base.demand_misses);
  };
  rep.demand_loads = base.demand_loads;
  rep.baseline_misses = base.demand_misses;
  rep.prefetches_no_flush = plain.prefetches_issued;
  rep.useful_no_flush = plain.useful_prefetches;
  rep.prefetches_issued = flushed.prefetches_issued;
  rep.useful_prefetches = flushed.useful_prefetches;
  rep.coverage_no_flush = coverage(plain);
  rep.coverage = coverage(flushed);
  rep.coverage_delta = rep.coverage_no_flush - rep.coverage;
  rep.flushes = flushed.resets;
  rep.reset_cycles_total = flushed.reset_cycles;
  return rep;
}

inline std::uint64_t microseconds_to_cycles(double us, double clock_ghz = 3.6) {
  if (!(us >= 0.0) || !(clock_ghz > 0.0)) throw std::invalid_argument("period and clock must be non-negative");
  return static_cast<std::uint64_t>(std::llround(us * clock_ghz * 1000.0));
}

}  // namespace afterimage
