#pragma once

// Command-line front end. Kept in a header so tests can drive dispatch() directly.

#include <afterimage.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace afterimage::cli {

enum ExitCode { kOk = 0, kMismatch = 1, kUsage = 2 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Settings = std::map<std::string, std::string>;

// key=value lines; `#` starts a comment, blank lines are ignored.
inline Settings read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  Settings s;
  std::string raw;
  std::size_t n = 0;
  while (std::getline(in, raw)) {
    ++n;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line{detail::trim(raw)};
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    const std::string key{detail::trim(std::string_view(line).substr(0, eq))};
    const std::string value{detail::trim(std::string_view(line).substr(eq + 1))};
    if (key.empty()) throw UsageError(path.string() + ":" + std::to_string(n) + ": empty key");
    s[key] = value;
  }
  return s;
}

inline const Settings& defaults() {
  static const Settings d{
      {"seed", "1"},
      {"output", "-"},
      {"which", "all"},
      {"variant", "1"},
      {"channel", "flush_reload"},
      {"rounds", "200"},
      {"noise_evict", "0"},
      {"noise_load", "0"},
      {"next_line_noise", "false"},
      {"flush_policy", "none"},
      {"kernel_search", "true"},
      {"period_us", "10"},
      {"write_ports", "1"},
      {"clock_ghz", "3.6"},
      {"trace", ""},
      {"sequences", "100000"},
      {"tlb_capacity", "64"},
      {"cache.slices", "4"},
      {"cache.sets_per_slice", "2048"},
      {"cache.associativity", "16"},
      {"cache.hit_latency", "40"},
      {"cache.miss_latency", "200"},
      {"cache.threshold", "120"},
  };
  return d;
}

// Keys that matter for each subcommand; only these are echoed into its output.
inline std::vector<std::string> keys_for(const std::string& sub) {
  std::vector<std::string> common{"seed",
                                  "tlb_capacity",
                                  "cache.slices",
                                  "cache.sets_per_slice",
                                  "cache.associativity",
                                  "cache.hit_latency",
                                  "cache.miss_latency",
                                  "cache.threshold"};
  std::vector<std::string> extra;
  if (sub == "reveng") extra = {"which"};
  if (sub == "attack") {
    extra = {"variant", "channel", "rounds", "noise_evict", "noise_load", "next_line_noise", "flush_policy",
             "kernel_search"};
  }
  if (sub == "mitigate") extra = {"period_us", "write_ports", "clock_ghz", "trace", "rounds"};
  if (sub == "oracle") extra = {"sequences"};
  extra.insert(extra.begin(), "subcommand");
  extra.insert(extra.end(), common.begin(), common.end());
  return extra;
}

class Resolved {
 public:
  explicit Resolved(Settings s) : s_(std::move(s)) {}

  const std::string& str(const std::string& key) const {
    const auto it = s_.find(key);
    if (it == s_.end()) throw std::logic_error("no setting " + key);
    return it->second;
  }
  std::uint64_t u64(const std::string& key) const {
    std::uint64_t v = 0;
    if (!detail::parse_number(std::string_view(str(key)), v, 10)) throw UsageError(key + " must be a non-negative integer");
    return v;
  }
  double real(const std::string& key) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(str(key), &used);
      if (used != str(key).size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw UsageError(key + " must be a number");
    }
  }
  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError(key + " must be true or false");
  }
  std::vector<std::pair<std::string, std::string>> echo(const std::vector<std::string>& keys) const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : keys) out.emplace_back(k, str(k));
    return out;
  }
  CacheConfig cache() const {
    CacheConfig c;
    c.slices = u64("cache.slices");
    c.sets_per_slice = u64("cache.sets_per_slice");
    c.associativity = u64("cache.associativity");
    c.hit_latency = static_cast<std::uint32_t>(u64("cache.hit_latency"));
    c.miss_latency = static_cast<std::uint32_t>(u64("cache.miss_latency"));
    c.threshold = static_cast<std::uint32_t>(u64("cache.threshold"));
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return c;
  }

 private:
  Settings s_;
};

inline void write_table(const CsvTable& t, const std::string& output, std::ostream& out) {
  if (output == "-") {
    write_csv(t, out);
    return;
  }
  try {
    emit_csv(t, output);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

inline const char* yes_no(bool b) { return b ? "1" : "0"; }

// --- subcommands -------------------------------------------------------------

inline int run_reveng(const Resolved& r, std::ostream& out, std::ostream& err) {
  const std::string which = r.str("which");
  const std::vector<std::string> all{"indexing", "confstride", "page", "entries", "replacement"};
  if (which != "all" && std::find(all.begin(), all.end(), which) == all.end()) {
    throw UsageError("--which must be one of indexing, confstride, page, entries, replacement, all");
  }
  const std::string dir = r.str("output") == "-" ? "." : r.str("output");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto header = r.echo(keys_for("reveng"));
  bool ok = true;
  auto check = [&](bool cond, const std::string& what) {
    if (!cond) {
      err << "mismatch: " << what << '\n';
      ok = false;
    }
  };
  auto wants = [&](const char* name) { return which == "all" || which == name; };

  if (wants("indexing")) {
    const auto ix = rev_indexing();
    CsvTable t{header, {"offset", "triggered"}, {}, {}};
    for (std::size_t o = 0; o < ix.triggered.size(); ++o) {
      t.rows.push_back({std::to_string(o), yes_no(ix.triggered[o])});
      check(ix.triggered[o] == (o == ix.trained_ip.ip_tag()), "indexing offset " + std::to_string(o));
    }
    emit_csv(t, std::filesystem::path(dir) / "reveng_indexing.csv");
  }
  if (wants("confstride")) {
    CsvTable t{header, {"mode", "phase", "iteration", "trigger"}, {}, {}};
    const std::pair<OffsetMode, const char*> modes[] = {{OffsetMode::random, "random"},
                                                        {OffsetMode::equals_st2, "equals_st2"}};
    for (const auto& [mode, name] : modes) {
      const auto res = rev_conf_stride(7, 5, 4, 3, mode, r.u64("seed"));
      for (std::size_t i = 0; i < res.phase1.size(); ++i) {
        t.rows.push_back({name, "1", std::to_string(i + 1), to_string(res.phase1[i])});
      }
      for (std::size_t i = 0; i < res.phase2.size(); ++i) {
        t.rows.push_back({name, "2", std::to_string(i + 1), to_string(res.phase2[i])});
      }
      const std::vector<Trigger> expect = mode == OffsetMode::random
          ? std::vector<Trigger>{Trigger::first_stride, Trigger::none, Trigger::second_stride}
          : std::vector<Trigger>{Trigger::first_stride, Trigger::second_stride, Trigger::second_stride};
      check(res.phase2 == expect, std::string("confstride ") + name);
    }
    emit_csv(t, std::filesystem::path(dir) / "reveng_confstride.csv");
  }
  if (wants("page")) {
    CsvTable t{header, {"offset", "pool", "first_access", "second_access", "triggered"}, {}, {}};
    for (std::uint64_t off = 1; off <= 4; ++off) {
      for (const auto pool : {PagePool::reclaimed, PagePool::locked}) {
        const auto p = rev_page(off, pool);
        const bool expect = pool == PagePool::reclaimed || off == 1;
        const char* name = pool == PagePool::reclaimed ? "reclaimed" : "locked";
        t.rows.push_back({std::to_string(off), name, yes_no(p.first_access), yes_no(p.second_access), yes_no(p.triggered())});
        check(p.triggered() == expect, "page offset " + std::to_string(off) + " " + name);
      }
    }
    emit_csv(t, std::filesystem::path(dir) / "reveng_page.csv");
  }
  if (wants("entries")) {
    CsvTable t{header, {"n_ips", "position", "triggered"}, {}, {}};
    for (const std::size_t n : {24u, 26u, 30u}) {
      const auto alive = rev_entries(n);
      for (std::size_t k = 0; k < n; ++k) {
        t.rows.push_back({std::to_string(n), std::to_string(k + 1), yes_no(alive[k])});
        check(alive[k] == (k >= n - kPrefetcherEntries), "entries " + std::to_string(n) + " position " + std::to_string(k + 1));
      }
    }
    emit_csv(t, std::filesystem::path(dir) / "reveng_entries.csv");
  }
  if (wants("replacement")) {
    const auto evicted = rev_replacement(8, 8);
    CsvTable t{header, {"retrain", "fresh", "position", "evicted"}, {}, {}};
    for (std::size_t k = 1; k <= kPrefetcherEntries + 8; ++k) {
      const bool e = std::find(evicted.begin(), evicted.end(), k) != evicted.end();
      t.rows.push_back({"8", "8", std::to_string(k), yes_no(e)});
      check(e == (k >= 9 && k <= 16), "replacement position " + std::to_string(k));
    }
    emit_csv(t, std::filesystem::path(dir) / "reveng_replacement.csv");
  }
  out << (ok ? "reveng: all verdicts match\n" : "reveng: verdict mismatch\n");
  return ok ? kOk : kMismatch;
}

inline FlushPolicy parse_policy(const std::string& s) {
  if (s == "none") return FlushPolicy::none();
  if (s == "on_switch") return FlushPolicy::on_switch();
  throw UsageError("flush_policy must be none or on_switch");
}

inline int run_attack_cmd(const Resolved& r, std::ostream& out) {
  AttackConfig cfg;
  const auto variant = r.u64("variant");
  if (variant < 1 || variant > 3) throw UsageError("variant must be 1, 2 or 3");
  cfg.variant = static_cast<int>(variant);
  const auto channel = parse_channel(r.str("channel"));
  if (!channel) throw UsageError("channel must be prime_probe, flush_reload or status_probe");
  cfg.channel = *channel;
  if (const auto why = unsupported_reason(cfg.variant, cfg.channel); !why.empty()) throw UsageError(why);
  cfg.rounds = r.u64("rounds");
  cfg.seed = r.u64("seed");
  cfg.noise.p_evict = r.real("noise_evict");
  cfg.noise.p_extra_load = r.real("noise_load");
  cfg.noise.next_line_noise = r.flag("next_line_noise");
  cfg.noise.seed = cfg.seed;
  try {
    cfg.noise.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.flush_policy = parse_policy(r.str("flush_policy"));
  cfg.search_kernel_ip = r.flag("kernel_search");
  cfg.cache = r.cache();
  cfg.tlb_capacity = r.u64("tlb_capacity");

  const AttackOutcome o = run_attack(cfg);
  CsvTable t{r.echo(keys_for("attack")), {"round", "truth", "detected_stride", "inferred", "success"}, {}, {}};
  for (const auto& round : o.rounds) {
    t.rows.push_back({std::to_string(round.round), yes_no(round.truth),
                      round.detected_stride ? std::to_string(*round.detected_stride) : "",
                      to_string(round.inferred), yes_no(round.success)});
  }
  t.trailer.emplace_back("success_rate", format_fixed(o.success_rate()));
  write_table(t, r.str("output"), out);
  return kOk;
}

inline int run_mitigate(const Resolved& r, std::ostream& out, std::ostream& err) {
  MitigationConfig mc;
  const double period_us = r.real("period_us");
  if (period_us < 0.0) throw UsageError("period_us must not be negative");
  if (period_us > 0.0) mc.flush_period_cycles = microseconds_to_cycles(period_us, r.real("clock_ghz"));
  mc.write_ports = r.u64("write_ports");
  if (mc.write_ports == 0) throw UsageError("write_ports must be at least 1");
  mc.cache = r.cache();
  mc.tlb_capacity = r.u64("tlb_capacity");

  std::vector<TraceRecord> trace;
  if (r.str("trace").empty()) {
    trace = synthetic_strided_trace({});
  } else {
    std::ifstream in(r.str("trace"));
    if (!in) throw UsageError("cannot read trace " + r.str("trace"));
    try {
      trace = parse_trace(in);
    } catch (const TraceParseError& e) {
      throw UsageError(e.what());
    }
  }
  MitigationReport rep;
  try {
    rep = mitigation_eval(trace, mc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  double blocked[2] = {0.0, 0.0};
  for (int v = 2; v <= 3; ++v) {
    AttackConfig ac;
    ac.variant = v;
    ac.rounds = r.u64("rounds");
    ac.seed = r.u64("seed");
    ac.flush_policy = FlushPolicy::on_switch(mc.write_ports);
    ac.search_kernel_ip = false;
    ac.cache = mc.cache;
    blocked[v - 2] = run_attack(ac).success_rate();
  }

  CsvTable t{r.echo(keys_for("mitigate")), {"metric", "value"}, {}, {}};
  auto add = [&](const char* k, const std::string& v) { t.rows.push_back({k, v}); };
  add("flush_period_cycles", rep.flush_period_cycles ? std::to_string(*rep.flush_period_cycles) : "never");
  add("demand_loads", std::to_string(rep.demand_loads));
  add("baseline_misses", std::to_string(rep.baseline_misses));
  add("useful_prefetches_no_flush", std::to_string(rep.useful_no_flush));
  add("useful_prefetches_flush", std::to_string(rep.useful_prefetches));
  add("coverage_no_flush", format_fixed(rep.coverage_no_flush));
  add("coverage_flush", format_fixed(rep.coverage));
  add("coverage_delta", format_fixed(rep.coverage_delta));
  add("flushes", std::to_string(rep.flushes));
  add("reset_cycles_per_flush", std::to_string(rep.reset_cycles_per_flush));
  add("reset_cycles_total", std::to_string(rep.reset_cycles_total));
  add("variant2_success_on_switch", format_fixed(blocked[0]));
  add("variant3_success_on_switch", format_fixed(blocked[1]));
  write_table(t, r.str("output"), out);
  const bool ok = blocked[0] <= 0.05 && blocked[1] <= 0.05;
  if (!ok) err << "mitigation did not block the attack\n";
  return ok ? kOk : kMismatch;
}

inline int run_oracle(const Resolved& r, std::ostream& out, std::ostream& err) {
  const auto rep = run_oracle_equivalence(r.u64("sequences"), r.u64("seed"));
  CsvTable t{r.echo(keys_for("oracle")), {"metric", "value"}, {}, {}};
  t.rows.push_back({"sequences", std::to_string(rep.sequences)});
  t.rows.push_back({"loads", std::to_string(rep.loads)});
  t.rows.push_back({"prefetches", std::to_string(rep.prefetches)});
  t.rows.push_back({"mismatches", std::to_string(rep.mismatches)});
  write_table(t, r.str("output"), out);
  if (rep.mismatches != 0) {
    err << "oracle mismatch: " << rep.first_mismatch << '\n';
    return kMismatch;
  }
  return kOk;
}

// --- entry point -------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"IP-stride prefetcher side-channel simulator", "afterimage"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  std::map<std::string, std::string> flags;
  std::string config_path;
  auto opt = [&](CLI::App* a, const std::string& name, const std::string& key, const std::string& desc) {
    a->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, desc);
  };
  auto flag = [&](CLI::App* a, const std::string& name, const std::string& key, const std::string& desc) {
    a->add_flag_callback(name, [&flags, key] { flags[key] = "true"; }, desc);
  };

  app.add_option("--config", config_path, "key=value settings file; flags take precedence");
  opt(&app, "--seed", "seed", "RNG seed (default: $AFTERIMAGE_SEED, else 1)");
  opt(&app, "-o,--output", "output", "output file (attack, mitigate, oracle) or directory (reveng); '-' is stdout");
  app.fallthrough();

  auto* reveng = app.add_subcommand("reveng", "reverse-engineering microbenchmarks");
  opt(reveng, "--which", "which", "indexing|confstride|page|entries|replacement|all");

  auto* attack = app.add_subcommand("attack", "run one attack variant over a number of rounds");
  opt(attack, "--variant", "variant", "1, 2 or 3");
  opt(attack, "--channel", "channel", "prime_probe|flush_reload|status_probe");
  opt(attack, "--rounds", "rounds", "number of secret bits");
  opt(attack, "--noise-evict", "noise_evict", "per-line eviction probability");
  opt(attack, "--noise-load", "noise_load", "per-round stray-line probability");
  flag(attack, "--next-line-noise", "next_line_noise", "enable adjacent-line prefetch noise");
  opt(attack, "--flush-policy", "flush_policy", "none|on_switch");
  flag(attack, "--known-kernel-tag", "kernel_search", "variant 3: skip the IP search");

  auto* mitigate = app.add_subcommand("mitigate", "evaluate clearing the prefetcher periodically");
  opt(mitigate, "--period-us", "period_us", "flush period in microseconds (0: never)");
  opt(mitigate, "--write-ports", "write_ports", "table write ports used by the reset");
  opt(mitigate, "--clock-ghz", "clock_ghz", "clock used to convert the period to cycles");
  opt(mitigate, "--trace", "trace", "ip_hex,vaddr_hex,domain_id trace instead of the synthetic workload");
  opt(mitigate, "--rounds", "rounds", "rounds for the attack-blocking check");

  auto* oracle = app.add_subcommand("oracle", "compare the prefetcher against the reference transcription");
  opt(oracle, "--sequences", "sequences", "number of random load sequences");

  for (auto* sub : {reveng, attack, mitigate, oracle}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kUsage;
  }
  if (flags.count("kernel_search")) flags["kernel_search"] = "false";

  try {
    Settings s = defaults();
    if (const char* env = std::getenv("AFTERIMAGE_SEED"); env && *env) s["seed"] = env;
    if (!config_path.empty()) {
      for (const auto& [k, v] : read_config_file(config_path)) {
        if (!s.count(k)) throw UsageError("unknown config key " + k);
        s[k] = v;
      }
    }
    for (const auto& [k, v] : flags) s[k] = v;
    const auto* sub = app.get_subcommands().front();
    s["subcommand"] = sub->get_name();
    const Resolved r(std::move(s));
    r.u64("seed");

    if (sub == reveng) return run_reveng(r, out, err);
    if (sub == attack) return run_attack_cmd(r, out);
    if (sub == mitigate) return run_mitigate(r, out, err);
    return run_oracle(r, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kMismatch;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << '\n';
    return kMismatch;
  }
}

}  // namespace afterimage::cli
