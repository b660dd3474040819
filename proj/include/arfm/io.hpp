#pragma once

// On-disk artifacts: datasets (PFT1 tensors + a tab-separated index) and
// checkpoints (one PFT1 file per parameter + config.json).

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "arfm/model.hpp"
#include "arfm/nn/params.hpp"

namespace arfm::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline json to_json(const WorldSpec& w) {
  return {{"seed", w.seed},
          {"frame_rate", w.frame_rate},
          {"latent_dim", w.latent_dim},
          {"n_codebooks", w.n_codebooks},
          {"codebook_size", w.codebook_size},
          {"chord_vocab", w.chord_vocab},
          {"melody_vocab", w.melody_vocab},
          {"beat_period", w.beat_period},
          {"noise_std", w.noise_std}};
}

inline WorldSpec world_from_json(const json& j) {
  WorldSpec w;
  w.seed = j.at("seed").get<std::uint64_t>();
  w.frame_rate = j.at("frame_rate").get<double>();
  w.latent_dim = j.at("latent_dim").get<int>();
  w.n_codebooks = j.at("n_codebooks").get<int>();
  w.codebook_size = j.at("codebook_size").get<int>();
  w.chord_vocab = j.at("chord_vocab").get<int>();
  w.melody_vocab = j.at("melody_vocab").get<int>();
  w.beat_period = j.at("beat_period").get<int>();
  w.noise_std = j.at("noise_std").get<float>();
  return w;
}

inline json to_json(const NormStats& n) {
  return {{"mean", n.mean}, {"mean_std", n.mean_std}, {"n_segments", n.n_segments}, {"clamped", n.clamped}};
}

inline NormStats norm_from_json(const json& j) {
  NormStats n;
  n.mean = j.at("mean").get<float>();
  n.mean_std = j.at("mean_std").get<float>();
  n.n_segments = j.at("n_segments").get<std::size_t>();
  n.clamped = j.at("clamped").get<bool>();
  return n;
}

inline json to_json(const ModelShape& s) {
  return {{"n_blocks", s.n_blocks}, {"model_dim", s.model_dim},       {"n_heads", s.n_heads},
          {"ff_dim", s.ff_dim},     {"cond_emb_dim", s.cond_emb_dim}, {"max_len", s.max_len}};
}

inline ModelShape shape_from_json(const json& j) {
  ModelShape s;
  s.n_blocks = j.at("n_blocks").get<int>();
  s.model_dim = j.at("model_dim").get<int>();
  s.n_heads = j.at("n_heads").get<int>();
  s.ff_dim = j.at("ff_dim").get<int>();
  s.cond_emb_dim = j.at("cond_emb_dim").get<int>();
  s.max_len = j.at("max_len").get<int>();
  return s;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + p.string());
  f << text;
  ARFM_CHECK(f.good(), ErrorKind::kIo, "write failed for " + p.string());
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct CheckpointMeta {
  long step = 0;
  std::uint64_t seed = 0;
  std::string finetune;  // "", "fim" or "inpaint"
};

inline void save_checkpoint(const Model& m, const CheckpointMeta& meta, const fs::path& dir) {
  json cfg = {{"format", "arfm-checkpoint-1"},
              {"paradigm", to_string(m.paradigm())},
              {"shape", to_json(m.spec().shape)},
              {"world", to_json(m.spec().world)},
              {"norm", to_json(m.spec().norm)},
              {"step", meta.step},
              {"seed", meta.seed},
              {"finetune", meta.finetune},
              {"param_count", m.layout().total()}};
  fs::create_directories(dir);
  nn::save_params(m.layout(), m.params, dir / "params");
  write_file(dir / "config.json", cfg.dump(2) + "\n");
}

inline ModelSpec read_model_spec(const fs::path& dir, CheckpointMeta* meta = nullptr) {
  ARFM_CHECK(fs::exists(dir / "config.json"), ErrorKind::kIo, "no checkpoint at " + dir.string());
  const json cfg = read_json(dir / "config.json");
  try {
    ModelSpec spec;
    spec.paradigm = parse_paradigm(cfg.at("paradigm").get<std::string>());
    spec.shape = shape_from_json(cfg.at("shape"));
    spec.world = world_from_json(cfg.at("world"));
    spec.norm = norm_from_json(cfg.at("norm"));
    if (meta) {
      meta->step = cfg.at("step").get<long>();
      meta->seed = cfg.at("seed").get<std::uint64_t>();
      meta->finetune = cfg.value("finetune", "");
    }
    return spec;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, (dir / "config.json").string() + ": " + e.what());
  }
}

inline Model load_checkpoint(const fs::path& dir, CheckpointMeta* meta = nullptr) {
  Model m(read_model_spec(dir, meta));
  m.params = nn::load_params(m.layout(), dir / "params");
  return m;
}

// ---------------------------------------------------------------------------
// Datasets.

struct DatasetInfo {
  WorldSpec world;
  NormStats norm;
  double seconds = 10.0;
  std::size_t count = 0;
};

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<int> split_ints(const std::string& s, const std::string& ctx) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    ARFM_CHECK(used == tok.size(), ErrorKind::kFormat, ctx + ": bad integer '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

inline constexpr const char* kIndexHeader = "id\tlatent\ttokens\tcaption\tchords\tmelody\tdrums\tbeats";

/// Streams samples into a dataset directory.
class DatasetWriter {
 public:
  DatasetWriter(const fs::path& dir, const DatasetInfo& info) : dir_(dir), info_(info) {
    fs::create_directories(dir / "latents");
    fs::create_directories(dir / "tokens");
    index_ << kIndexHeader << '\n';
  }

  void add(const WorldSample& s) {
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", info_.count++);
    const std::string lat = std::string("latents/") + id + ".pft", tok = std::string("tokens/") + id + ".pft";
    save_tensor(s.latent, dir_ / lat);
    save_tensor(s.tokens.to_tensor(), dir_ / tok);
    const ControlSet& c = s.controls;
    index_ << id << '\t' << lat << '\t' << tok << '\t' << join_ints(s.caption) << '\t' << join_ints(c.chords) << '\t'
           << join_ints(c.melody) << '\t' << join_ints(c.drums) << '\t' << join_ints(c.beats) << '\n';
  }

  void finish() {
    write_file(dir_ / "index.tsv", index_.str());
    const json j = {{"format", "arfm-dataset-1"},
                    {"world", to_json(info_.world)},
                    {"norm", to_json(info_.norm)},
                    {"seconds", info_.seconds},
                    {"count", info_.count}};
    write_file(dir_ / "world.json", j.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  DatasetInfo info_;
  std::ostringstream index_;
};

inline DatasetInfo read_dataset_info(const fs::path& dir) {
  ARFM_CHECK(fs::exists(dir / "world.json"), ErrorKind::kIo, "no dataset at " + dir.string());
  const json j = read_json(dir / "world.json");
  try {
    DatasetInfo info;
    info.world = world_from_json(j.at("world"));
    info.norm = norm_from_json(j.at("norm"));
    info.seconds = j.at("seconds").get<double>();
    info.count = j.at("count").get<std::size_t>();
    return info;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, (dir / "world.json").string() + ": " + e.what());
  }
}

/// Loads up to `limit` samples (0 = all).
inline std::vector<WorldSample> load_dataset(const fs::path& dir, const DatasetInfo& info, std::size_t limit = 0) {
  std::istringstream in(read_file(dir / "index.tsv"));
  std::string line;
  std::getline(in, line);
  ARFM_CHECK(line == kIndexHeader, ErrorKind::kFormat, (dir / "index.tsv").string() + ": unexpected header");
  std::vector<WorldSample> out;
  std::size_t ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    if (limit && out.size() >= limit) break;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (;;) {
      const std::size_t t = line.find('\t', pos);
      f.push_back(line.substr(pos, t == std::string::npos ? std::string::npos : t - pos));
      if (t == std::string::npos) break;
      pos = t + 1;
    }
    const std::string ctx = (dir / "index.tsv").string() + ":" + std::to_string(ln);
    ARFM_CHECK(f.size() == 8, ErrorKind::kFormat, ctx + ": expected 8 fields");
    WorldSample s;
    s.latent = load_tensor(dir / f[1]);
    s.tokens = TokenGrid::from_tensor(load_tensor(dir / f[2]));
    s.caption = split_ints(f[3], ctx);
    s.controls.chords = split_ints(f[4], ctx);
    s.controls.melody = split_ints(f[5], ctx);
    s.controls.drums = split_ints(f[6], ctx);
    s.controls.beats = split_ints(f[7], ctx);
    s.controls.chord_rate = s.controls.melody_rate = s.controls.drum_rate = info.world.frame_rate;
    s.duration = info.seconds;
    ARFM_CHECK(s.controls.chords.size() == s.tokens.length() && s.latent.dim(0) == s.tokens.length(), ErrorKind::kFormat,
               ctx + ": stream lengths disagree");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace arfm::io
