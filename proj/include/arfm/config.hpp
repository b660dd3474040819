#pragma once

// Run configuration: INI-style text with [section] headers and key = value
// lines. Unknown sections or keys are rejected; `#` starts a comment.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "arfm/ar.hpp"
#include "arfm/fm.hpp"
#include "arfm/train.hpp"

namespace arfm {

struct DataConfig {
  std::size_t n_samples = 4096;
  std::size_t norm_segments = kDefaultNormSegments;
  double seconds = 10.0;
};

struct EvalConfig {
  std::size_t n_samples = 50;
  double seconds = 10.0;
  std::uint64_t seed = 777;
  int batch = 16;  // AR decoding batch
};

struct BenchConfig {
  std::vector<int> batch_sizes = {1, 2, 4, 8, 16, 32};
  std::vector<int> fm_steps = {10, 25, 50, 200};
  int warmup_iters = 3;
  int measured_iters = 10;
  double seconds = 2.0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs";
  WorldSpec world;
  ModelShape model{2, 32, 2, 128, 8, 512};
  DataConfig data;
  TrainConfig train;
  ar::ArSamplerConfig ar_sampler;
  fm::FmSamplerConfig fm_sampler;
  EvalConfig eval;
  BenchConfig bench;
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest representation that parses back to the same value of type T.
template <class T = double>
std::string fmt_double(T v) {
  char buf[64];
  if (v == std::trunc(v) && std::abs(v) < T(1e15)) {
    std::snprintf(buf, sizeof buf, "%.0f", double(v));
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, double(v));
    if (T(std::strtod(buf, nullptr)) == v) break;
  }
  return buf;
}

template <class T>
T parse_num(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    ARFM_CHECK(!v.empty() && end == v.c_str() + v.size() && std::isfinite(d), ErrorKind::kConfig,
               key + ": expected a number, got '" + v + "'");
    out = T(d);
  } else {
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    ARFM_CHECK(r.ec == std::errc() && r.ptr == v.data() + v.size(), ErrorKind::kConfig,
               key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_num<int>(key, trim(item)));
  ARFM_CHECK(!out.empty(), ErrorKind::kConfig, key + ": empty list");
  return out;
}

inline std::string fmt_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string section, key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T, class Get>
Field num(std::string sec, std::string key, Get get) {
  const std::string full = sec + "." + key;
  return {sec, key,
          [get](const RunConfig& c) {
            const T v = get(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return fmt_double<T>(v);
            else return std::to_string(v);
          },
          [get, full](RunConfig& c, const std::string& v) { get(c) = parse_num<T>(full, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(num<std::uint64_t>("run", "seed", [](RunConfig& c) -> auto& { return c.seed; }));
    v.push_back({"run", "out_dir", [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, const std::string& s) { c.out_dir = s; }});

    v.push_back(num<std::uint64_t>("world", "seed", [](RunConfig& c) -> auto& { return c.world.seed; }));
    v.push_back(num<double>("world", "frame_rate", [](RunConfig& c) -> auto& { return c.world.frame_rate; }));
    v.push_back(num<int>("world", "latent_dim", [](RunConfig& c) -> auto& { return c.world.latent_dim; }));
    v.push_back(num<int>("world", "n_codebooks", [](RunConfig& c) -> auto& { return c.world.n_codebooks; }));
    v.push_back(num<int>("world", "codebook_size", [](RunConfig& c) -> auto& { return c.world.codebook_size; }));
    v.push_back(num<int>("world", "chord_vocab", [](RunConfig& c) -> auto& { return c.world.chord_vocab; }));
    v.push_back(num<int>("world", "melody_vocab", [](RunConfig& c) -> auto& { return c.world.melody_vocab; }));
    v.push_back(num<int>("world", "beat_period", [](RunConfig& c) -> auto& { return c.world.beat_period; }));
    v.push_back(num<float>("world", "noise_std", [](RunConfig& c) -> auto& { return c.world.noise_std; }));

    v.push_back(num<int>("model", "n_blocks", [](RunConfig& c) -> auto& { return c.model.n_blocks; }));
    v.push_back(num<int>("model", "model_dim", [](RunConfig& c) -> auto& { return c.model.model_dim; }));
    v.push_back(num<int>("model", "n_heads", [](RunConfig& c) -> auto& { return c.model.n_heads; }));
    v.push_back(num<int>("model", "ff_dim", [](RunConfig& c) -> auto& { return c.model.ff_dim; }));
    v.push_back(num<int>("model", "cond_emb_dim", [](RunConfig& c) -> auto& { return c.model.cond_emb_dim; }));
    v.push_back(num<int>("model", "max_len", [](RunConfig& c) -> auto& { return c.model.max_len; }));

    v.push_back(num<std::size_t>("data", "n_samples", [](RunConfig& c) -> auto& { return c.data.n_samples; }));
    v.push_back(num<std::size_t>("data", "norm_segments", [](RunConfig& c) -> auto& { return c.data.norm_segments; }));
    v.push_back(num<double>("data", "seconds", [](RunConfig& c) -> auto& { return c.data.seconds; }));

    v.push_back(num<int>("train", "batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    v.push_back(num<double>("train", "segment_seconds", [](RunConfig& c) -> auto& { return c.train.segment_seconds; }));
    v.push_back(num<long>("train", "steps", [](RunConfig& c) -> auto& { return c.train.steps; }));
    v.push_back(num<long>("train", "warmup", [](RunConfig& c) -> auto& { return c.train.warmup; }));
    v.push_back(num<double>("train", "lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
    v.push_back(num<double>("train", "weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    v.push_back(num<double>("train", "clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; }));
    v.push_back(num<double>("train", "p_drop", [](RunConfig& c) -> auto& { return c.train.p_drop; }));
    v.push_back(num<double>("train", "p_all", [](RunConfig& c) -> auto& { return c.train.p_all; }));
    v.push_back(num<double>("train", "sigma_min", [](RunConfig& c) -> auto& { return c.train.sigma_min; }));
    v.push_back({"train", "finetune", [](const RunConfig& c) { return std::string(to_string(c.train.finetune)); },
                 [](RunConfig& c, const std::string& s) { c.train.finetune = parse_finetune(s); }});
    v.push_back({"train", "mask_policy",
                 [](const RunConfig& c) { return std::string(fm::to_string(c.train.mask_policy)); },
                 [](RunConfig& c, const std::string& s) { c.train.mask_policy = fm::parse_mask_policy(s); }});

    v.push_back(num<double>("ar_sampler", "temperature", [](RunConfig& c) -> auto& { return c.ar_sampler.temperature; }));
    v.push_back({"ar_sampler", "top_k",
                 [](const RunConfig& c) { return c.ar_sampler.top_k ? std::to_string(*c.ar_sampler.top_k) : "none"; },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "none") c.ar_sampler.top_k.reset();
                   else c.ar_sampler.top_k = parse_num<int>("ar_sampler.top_k", s);
                 }});
    v.push_back({"ar_sampler", "top_p",
                 [](const RunConfig& c) { return c.ar_sampler.top_p ? fmt_double(*c.ar_sampler.top_p) : "none"; },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "none") c.ar_sampler.top_p.reset();
                   else c.ar_sampler.top_p = parse_num<double>("ar_sampler.top_p", s);
                 }});
    v.push_back(num<double>("ar_sampler", "cfg_coef", [](RunConfig& c) -> auto& { return c.ar_sampler.cfg_coef; }));
    v.push_back(num<std::size_t>("ar_sampler", "max_frames", [](RunConfig& c) -> auto& { return c.ar_sampler.max_frames; }));

    v.push_back({"fm_sampler", "solver", [](const RunConfig& c) { return std::string(fm::to_string(c.fm_sampler.solver)); },
                 [](RunConfig& c, const std::string& s) { c.fm_sampler.solver = fm::parse_solver(s); }});
    v.push_back(num<int>("fm_sampler", "n_steps", [](RunConfig& c) -> auto& { return c.fm_sampler.n_steps; }));
    v.push_back(num<double>("fm_sampler", "rtol", [](RunConfig& c) -> auto& { return c.fm_sampler.rtol; }));
    v.push_back(num<double>("fm_sampler", "atol", [](RunConfig& c) -> auto& { return c.fm_sampler.atol; }));
    v.push_back(num<std::size_t>("fm_sampler", "max_evals", [](RunConfig& c) -> auto& { return c.fm_sampler.max_evals; }));
    v.push_back(num<double>("fm_sampler", "cfg_coef", [](RunConfig& c) -> auto& { return c.fm_sampler.cfg_coef; }));
    v.push_back(num<double>("fm_sampler", "inversion_cfg_coef",
                            [](RunConfig& c) -> auto& { return c.fm_sampler.inversion_cfg_coef; }));

    v.push_back(num<std::size_t>("eval", "n_samples", [](RunConfig& c) -> auto& { return c.eval.n_samples; }));
    v.push_back(num<double>("eval", "seconds", [](RunConfig& c) -> auto& { return c.eval.seconds; }));
    v.push_back(num<std::uint64_t>("eval", "seed", [](RunConfig& c) -> auto& { return c.eval.seed; }));
    v.push_back(num<int>("eval", "batch", [](RunConfig& c) -> auto& { return c.eval.batch; }));

    v.push_back({"bench", "batch_sizes", [](const RunConfig& c) { return fmt_int_list(c.bench.batch_sizes); },
                 [](RunConfig& c, const std::string& s) { c.bench.batch_sizes = parse_int_list("bench.batch_sizes", s); }});
    v.push_back({"bench", "fm_steps", [](const RunConfig& c) { return fmt_int_list(c.bench.fm_steps); },
                 [](RunConfig& c, const std::string& s) { c.bench.fm_steps = parse_int_list("bench.fm_steps", s); }});
    v.push_back(num<int>("bench", "warmup_iters", [](RunConfig& c) -> auto& { return c.bench.warmup_iters; }));
    v.push_back(num<int>("bench", "measured_iters", [](RunConfig& c) -> auto& { return c.bench.measured_iters; }));
    v.push_back(num<double>("bench", "seconds", [](RunConfig& c) -> auto& { return c.bench.seconds; }));
    return v;
  }();
  return f;
}

}  // namespace cfgdetail

inline void validate(const RunConfig& c) {
  c.train.validate();
  c.ar_sampler.validate();
  c.fm_sampler.validate();
  ARFM_CHECK(c.data.n_samples >= 1 && c.data.norm_segments >= 1 && c.data.seconds > 0.0, ErrorKind::kConfig,
             "data: n_samples, norm_segments and seconds must be positive");
  ARFM_CHECK(c.eval.n_samples >= 1 && c.eval.seconds > 0.0 && c.eval.batch >= 1, ErrorKind::kConfig,
             "eval: n_samples, seconds and batch must be positive");
  ARFM_CHECK(c.bench.warmup_iters >= 0 && c.bench.measured_iters >= 1 && c.bench.seconds > 0.0, ErrorKind::kConfig,
             "bench: iteration counts must be >= 1");
  ARFM_CHECK(std::is_sorted(c.bench.batch_sizes.begin(), c.bench.batch_sizes.end()) && c.bench.batch_sizes.front() >= 1,
             ErrorKind::kConfig, "bench: batch_sizes must be ascending and positive");
  for (int s : c.bench.fm_steps) ARFM_CHECK(s >= 1, ErrorKind::kConfig, "bench: fm_steps must be >= 1");
  ModelSpec probe;
  probe.shape = c.model;
  probe.world = c.world;
  probe.backbone().validate();
}

/// Sets `section.key` to `value`.
inline void set_option(RunConfig& c, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  ARFM_CHECK(dot != std::string::npos, ErrorKind::kConfig, "option '" + dotted + "' must look like section.key");
  const std::string sec = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  for (const auto& f : cfgdetail::fields())
    if (f.section == sec && f.key == key) {
      f.set(c, value);
      return;
    }
  throw Error(ErrorKind::kConfig, "unknown config key '" + dotted + "'");
}

inline std::string get_option(const RunConfig& c, const std::string& dotted) {
  for (const auto& f : cfgdetail::fields())
    if (f.section + "." + f.key == dotted) return f.get(c);
  throw Error(ErrorKind::kConfig, "unknown config key '" + dotted + "'");
}

inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = cfgdetail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(ln);
    if (line.front() == '[') {
      ARFM_CHECK(line.back() == ']', ErrorKind::kConfig, where + ": malformed section header");
      section = cfgdetail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : cfgdetail::fields()) known |= f.section == section;
      ARFM_CHECK(known, ErrorKind::kConfig, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    ARFM_CHECK(eq != std::string::npos, ErrorKind::kConfig, where + ": expected key = value");
    ARFM_CHECK(!section.empty(), ErrorKind::kConfig, where + ": key outside of a section");
    const std::string key = cfgdetail::trim(line.substr(0, eq)), value = cfgdetail::trim(line.substr(eq + 1));
    try {
      set_option(c, section + "." + key, value);
    } catch (const Error& e) {
      throw Error(ErrorKind::kConfig, where + ": " + e.what());
    }
  }
  return c;
}

inline std::string print_config(const RunConfig& c) {
  std::string out, section;
  for (const auto& f : cfgdetail::fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace arfm
