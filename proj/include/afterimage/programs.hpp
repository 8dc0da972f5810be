#pragma once

// Victim, gadget and kernel models, the address spaces they run in, and the
// scheduler that serialises them onto one Core.

#include <afterimage/core.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace afterimage {

enum class DomainKind { user_process, kernel };

struct SharedRegion {
  Address vbase{};
  std::uint64_t pframe = 0;
  std::uint64_t pages = 0;
  int peer = kNoDomain;
};

// An address space. Unmapped virtual frames map to vframe + frame_offset; explicit
// mappings (shared regions) override that.
class Domain {
 public:
  Domain(int id, DomainKind kind, std::uint64_t frame_offset)
      : id_(id), kind_(kind), frame_offset_(frame_offset) {}

  int id() const { return id_; }
  DomainKind kind() const { return kind_; }
  const std::vector<SharedRegion>& shared_regions() const { return shared_; }

  Address translate(Address vaddr) const {
    const auto it = explicit_.find(vaddr.page_frame());
    const std::uint64_t pframe = it != explicit_.end() ? it->second : vaddr.page_frame() + frame_offset_;
    return page_address(pframe, vaddr.page_offset());
  }

  void map_page(std::uint64_t vframe, std::uint64_t pframe) {
    for (const auto& [v, p] : explicit_) {
      if (p == pframe && v != vframe) {
        throw std::invalid_argument("domain " + std::to_string(id_) + " already maps physical frame " +
                                    std::to_string(pframe));
      }
    }
    explicit_[vframe] = pframe;
  }

  void add_shared(SharedRegion region) {
    for (std::uint64_t p = 0; p < region.pages; ++p) map_page(region.vbase.page_frame() + p, region.pframe + p);
    shared_.push_back(region);
  }

 private:
  int id_;
  DomainKind kind_;
  std::uint64_t frame_offset_;
  std::map<std::uint64_t, std::uint64_t> explicit_;
  std::vector<SharedRegion> shared_;
};

// Maps `pages` physical frames starting at `pframe` into both domains.
inline void share_region(Domain& a, Address a_vbase, Domain& b, Address b_vbase, std::uint64_t pframe,
                         std::uint64_t pages) {
  a.add_shared({a_vbase, pframe, pages, b.id()});
  b.add_shared({b_vbase, pframe, pages, a.id()});
}

// Ground-truth secret bits, first round first.
struct SecretSource {
  std::vector<bool> bits;

  static SecretSource from_seed(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SecretSource s;
    s.bits.reserve(count);
    for (std::size_t i = 0; i < count; ++i) s.bits.push_back((rng() & 1) != 0);
    return s;
  }
  // Least significant bit is consumed first, so 0b10 runs else-path then if-path.
  static SecretSource from_value(std::uint64_t value, std::size_t count) {
    SecretSource s;
    for (std::size_t i = 0; i < count; ++i) s.bits.push_back(((value >> i) & 1) != 0);
    return s;
  }
  std::size_t size() const { return bits.size(); }
};

class Machine;
struct EventLog;

struct ObserveContext {
  Machine& machine;
  int domain;
  EventLog& log;
};

struct Step;

struct LoadStep {
  Address ip{};
  Address vaddr{};
};
struct FlushStep {
  Address vaddr{};
  std::uint64_t lines = 1;
};
struct BranchStep {
  std::size_t bit_index = 0;
  bool secret = false;
  std::vector<Step> taken;
  std::vector<Step> not_taken;
};
struct ObserveStep {
  std::string label;
  std::function<void(ObserveContext&)> hook;
};

struct Step {
  std::variant<LoadStep, FlushStep, BranchStep, ObserveStep> op;
};

struct Program {
  std::vector<Step> steps;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
  Program& load(Address ip, Address vaddr) {
    steps.push_back({LoadStep{ip, vaddr}});
    return *this;
  }
  Program& flush(Address vaddr, std::uint64_t lines = 1) {
    steps.push_back({FlushStep{vaddr, lines}});
    return *this;
  }
  Program& observe(std::string label, std::function<void(ObserveContext&)> hook) {
    steps.push_back({ObserveStep{std::move(label), std::move(hook)}});
    return *this;
  }
  Program& append(const Program& other) {
    steps.insert(steps.end(), other.steps.begin(), other.steps.end());
    return *this;
  }
  Program slice(std::size_t first, std::size_t count) const {
    if (first > steps.size()) throw std::out_of_range("program slice starts past the end");
    const std::size_t last = std::min(steps.size(), first + count);
    return Program{{steps.begin() + static_cast<std::ptrdiff_t>(first),
                    steps.begin() + static_cast<std::ptrdiff_t>(last)}};
  }
};

// --- builders -------------------------------------------------------------

// Full IP with the requested low 8 bits, placed inside the 256-byte block at `base`.
inline Address ip_with_tag(Address base, std::uint8_t tag) { return Address{(base.value & ~0xFFull) | tag}; }

inline void check_training_stride(std::int32_t stride) {
  if (stride > kMaxStride || stride < -kMaxStride) {
    throw std::out_of_range("stride " + std::to_string(stride) + " does not fit the 13-bit stride field");
  }
  if (stride < 5 * static_cast<std::int32_t>(kLineSize) && stride > -5 * static_cast<std::int32_t>(kLineSize)) {
    throw std::invalid_argument("stride " + std::to_string(stride) +
                                " is within reach of the adjacent-line prefetchers (needs > 4 lines)");
  }
}

struct GadgetLayout {
  Address ip_base{0x7f3a5c401000};
  Address array_base{0x10000000};
};

struct Gadget {
  Program program;
  Address if_ip{};
  Address else_ip{};
  // False when both strides are equal: the two paths then leave the same footprint.
  bool distinguishable = true;
};

// Two loads whose IPs carry the victim's if/else tags, each walking `array` with its
// own constant stride.
inline Gadget build_gadget(std::uint8_t if_tag, std::uint8_t else_tag, std::int32_t stride_if,
                           std::int32_t stride_else, std::size_t iterations, GadgetLayout layout = {}) {
  if (if_tag == else_tag) throw std::invalid_argument("gadget if/else tags must differ");
  if (iterations == 0) throw std::invalid_argument("gadget needs at least one iteration");
  check_training_stride(stride_if);
  check_training_stride(stride_else);

  Gadget g;
  g.if_ip = ip_with_tag(layout.ip_base, if_tag);
  g.else_ip = ip_with_tag(layout.ip_base + 0x100, else_tag);
  g.distinguishable = stride_if != stride_else;
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto n = static_cast<std::int64_t>(i);
    g.program.load(g.if_ip, layout.array_base + n * stride_if);
    g.program.load(g.else_ip, layout.array_base + n * stride_else);
  }
  return g;
}

// A single strided training load, as used once the kernel's tag is known.
inline Program build_training_load(Address ip, std::int32_t stride, std::size_t iterations, Address array_base) {
  check_training_stride(stride);
  Program p;
  for (std::size_t i = 0; i < iterations; ++i) p.load(ip, array_base + static_cast<std::int64_t>(i) * stride);
  return p;
}

struct VictimLayout {
  Address ip_base{0x401000};
  // The victim's array occupies the first `array_lines` lines of its page, so a
  // prefetch from its last element can run past the array but stays in the page.
  std::uint64_t array_lines = 48;
  std::uint64_t seed = 1;
};

struct Victim {
  Program program;
  Address if_ip{};
  Address else_ip{};
  std::vector<Address> accessed;  // vaddr touched in each round
};

// One round per secret bit: `if (secret) array[address] else array[address]` with a
// uniformly random in-array byte address.
inline Victim build_victim(const SecretSource& secret, std::uint8_t if_tag, std::uint8_t else_tag,
                           Address array_base, VictimLayout layout = {}) {
  if (layout.array_lines == 0 || layout.array_lines > kLinesPerPage) {
    throw std::invalid_argument("victim array must fit in one page");
  }
  Victim v;
  v.if_ip = ip_with_tag(layout.ip_base, if_tag);
  v.else_ip = ip_with_tag(layout.ip_base + 0x100, else_tag);
  std::mt19937_64 rng(layout.seed);
  std::uniform_int_distribution<std::uint64_t> offset(0, layout.array_lines * kLineSize - 1);
  for (std::size_t r = 0; r < secret.size(); ++r) {
    const Address where = array_base + static_cast<std::int64_t>(offset(rng));
    v.accessed.push_back(where);
    BranchStep b{r, secret.bits[r], {}, {}};
    b.taken.push_back({LoadStep{v.if_ip, where}});
    b.not_taken.push_back({LoadStep{v.else_ip, where}});
    v.program.steps.push_back({std::move(b)});
  }
  return v;
}

struct KernelLayout {
  // Fixed once the system boots; KASLR shifts it by whole pages only.
  Address ip{0xffffffff81234530};
  std::uint64_t array_lines = 48;
  std::uint64_t seed = 2;
};

struct KernelSyscall {
  Program program;
  Address ip{};
  std::vector<Address> accessed;
};

// `num = random(); if (num) memory_space[get_address()]` once per secret bit.
inline KernelSyscall build_kernel_syscall(const SecretSource& secret, Address shared_region, KernelLayout layout = {}) {
  if (layout.array_lines == 0 || layout.array_lines > kLinesPerPage) {
    throw std::invalid_argument("kernel buffer must fit in one page");
  }
  KernelSyscall k;
  k.ip = layout.ip;
  std::mt19937_64 rng(layout.seed);
  std::uniform_int_distribution<std::uint64_t> offset(0, layout.array_lines * kLineSize - 1);
  for (std::size_t r = 0; r < secret.size(); ++r) {
    const Address where = shared_region + static_cast<std::int64_t>(offset(rng));
    k.accessed.push_back(where);
    BranchStep b{r, secret.bits[r], {}, {}};
    b.taken.push_back({LoadStep{k.ip, where}});
    k.program.steps.push_back({std::move(b)});
  }
  return k;
}

struct IpMatchingLayout {
  Address ip_base{0x7f3a5c500000};
  Address first_page{0x20000000};  // IP j of a group trains on first_page + j pages
  std::int32_t stride = 11 * static_cast<std::int32_t>(kLineSize);
  // Three passes leave part of a group evicted when the table still holds another
  // group's entries; the fourth pass brings every member back above threshold.
  std::size_t iterations = 4;
};

struct IpMatchingGroup {
  Program program;
  std::vector<std::uint8_t> tags;
  std::vector<Address> ips;
};

// Splits the 256 possible tags into groups of loads that can all be live in the
// prefetcher together. Tags are dealt round-robin, so groups past the 256th IP
// revisit tags from the start.
inline std::vector<IpMatchingGroup> ip_matching_groups(std::size_t n_groups, std::size_t group_size,
                                                       IpMatchingLayout layout = {}) {
  if (group_size == 0 || group_size > 256) throw std::invalid_argument("group size must be in 1..256");
  if (n_groups * group_size < 256) {
    throw std::invalid_argument(std::to_string(n_groups) + " groups of " + std::to_string(group_size) +
                                " IPs cannot cover all 256 tags");
  }
  check_training_stride(layout.stride);
  std::vector<IpMatchingGroup> groups(n_groups);
  std::uint64_t serial = 0;
  for (auto& g : groups) {
    for (std::size_t j = 0; j < group_size; ++j, ++serial) {
      const auto tag = static_cast<std::uint8_t>(serial & 0xFF);
      g.tags.push_back(tag);
      g.ips.push_back(Address{(layout.ip_base.value & ~0xFFull) + serial * 0x100 + tag});
    }
    for (std::size_t i = 0; i < layout.iterations; ++i) {
      for (std::size_t j = 0; j < group_size; ++j) {
        const Address page = layout.first_page + static_cast<std::int64_t>(j * kPageSize);
        g.program.load(g.ips[j], page + static_cast<std::int64_t>(i) * layout.stride);
      }
    }
  }
  return groups;
}

// --- scheduling -----------------------------------------------------------

struct Slice {
  int domain = kNoDomain;
  Program program;
};

struct Schedule {
  std::vector<Slice> slices;
  FlushPolicy flush_policy;
};

enum class EventKind { context_switch, load, prefetch, flush, prefetcher_reset, branch, observe };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::context_switch: return "switch";
    case EventKind::load: return "load";
    case EventKind::prefetch: return "prefetch";
    case EventKind::flush: return "flush";
    case EventKind::prefetcher_reset: return "reset";
    case EventKind::branch: return "branch";
    case EventKind::observe: return "observe";
  }
  return "?";
}

struct Event {
  std::uint64_t time = 0;
  int domain = kNoDomain;
  EventKind kind = EventKind::load;
  Address ip{};
  Address vaddr{};
  Address paddr{};
  std::uint32_t latency = 0;
  std::size_t bit_index = 0;
  bool secret = false;
  std::string label;
};

struct EventLog {
  std::vector<Event> events;

  std::vector<const Event*> of_kind(EventKind k) const {
    std::vector<const Event*> out;
    for (const auto& e : events) {
      if (e.kind == k) out.push_back(&e);
    }
    return out;
  }
  // Secret bit recorded for every executed branch, in execution order.
  std::vector<bool> executed_paths() const {
    std::vector<bool> out;
    for (const auto& e : events) {
      if (e.kind == EventKind::branch) out.push_back(e.secret);
    }
    return out;
  }
};

class Machine {
 public:
  explicit Machine(Core core = Core{}) : core_(std::move(core)) {}

  Core& core() { return core_; }
  const Core& core() const { return core_; }

  Domain& add_domain(Domain d) {
    const int id = d.id();
    auto [it, inserted] = domains_.emplace(id, std::move(d));
    if (!inserted) throw std::invalid_argument("duplicate domain id " + std::to_string(id));
    return it->second;
  }
  Domain& domain(int id) {
    auto it = domains_.find(id);
    if (it == domains_.end()) throw std::out_of_range("unknown domain " + std::to_string(id));
    return it->second;
  }
  bool has_domain(int id) const { return domains_.count(id) != 0; }

 private:
  Core core_;
  std::map<int, Domain> domains_;
};

namespace detail {

inline void execute(const std::vector<Step>& steps, Machine& m, Domain& d, EventLog& log) {
  Core& core = m.core();
  for (const Step& step : steps) {
    if (const auto* ld = std::get_if<LoadStep>(&step.op)) {
      const Address paddr = d.translate(ld->vaddr);
      const std::uint64_t resets_before = core.stats().resets;
      const LoadOutcome out = core.load(ld->ip, paddr);
      log.events.push_back({core.now(), d.id(), EventKind::load, ld->ip, ld->vaddr, paddr, out.latency, 0, false, {}});
      if (out.prefetch) {
        log.events.push_back({core.now(), d.id(), EventKind::prefetch, ld->ip, {}, out.prefetch->target, 0, 0, false, {}});
      }
      core.advance(out.latency);
      if (core.stats().resets != resets_before) {
        log.events.push_back({core.now(), d.id(), EventKind::prefetcher_reset, {}, {}, {}, 0, 0, false, "periodic"});
      }
    } else if (const auto* fl = std::get_if<FlushStep>(&step.op)) {
      for (std::uint64_t l = 0; l < fl->lines; ++l) {
        const Address va = fl->vaddr + static_cast<std::int64_t>(l * kLineSize);
        const Address pa = d.translate(va);
        core.flush(pa);
        log.events.push_back({core.now(), d.id(), EventKind::flush, {}, va, pa, 0, 0, false, {}});
      }
    } else if (const auto* br = std::get_if<BranchStep>(&step.op)) {
      log.events.push_back({core.now(), d.id(), EventKind::branch, {}, {}, {}, 0, br->bit_index, br->secret, {}});
      execute(br->secret ? br->taken : br->not_taken, m, d, log);
    } else if (const auto* ob = std::get_if<ObserveStep>(&step.op)) {
      log.events.push_back({core.now(), d.id(), EventKind::observe, {}, {}, {}, 0, 0, false, ob->label});
      if (ob->hook) {
        ObserveContext ctx{m, d.id(), log};
        ob->hook(ctx);
      }
    }
  }
}

}  // namespace detail

// Runs the slices in order on the machine's single core. The prefetcher, TLB and
// cache carry over between slices; the schedule's flush policy decides whether the
// prefetcher is cleared at switches or periodically.
inline EventLog run_schedule(const Schedule& schedule, Machine& machine) {
  for (const Slice& s : schedule.slices) {
    if (!machine.has_domain(s.domain)) {
      throw std::out_of_range("schedule references unknown domain " + std::to_string(s.domain));
    }
  }
  EventLog log;
  Core& core = machine.core();
  core.set_flush_policy(schedule.flush_policy);
  for (const Slice& s : schedule.slices) {
    if (s.domain != core.domain()) {
      const std::uint64_t resets_before = core.stats().resets;
      core.switch_domain(s.domain);
      log.events.push_back({core.now(), s.domain, EventKind::context_switch, {}, {}, {}, 0, 0, false, {}});
      if (core.stats().resets != resets_before) {
        log.events.push_back({core.now(), s.domain, EventKind::prefetcher_reset, {}, {}, {}, 0, 0, false, "switch"});
      }
    }
    detail::execute(s.program.steps, machine, machine.domain(s.domain), log);
  }
  return log;
}

}  // namespace afterimage
