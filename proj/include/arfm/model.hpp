#pragma once

#include <memory>
#include <string>
#include <vector>

#include "arfm/conditioning.hpp"
#include "arfm/nn/backbone.hpp"
#include "arfm/world/world.hpp"

namespace arfm {

enum class Paradigm { kAr, kFm };

inline const char* to_string(Paradigm p) { return p == Paradigm::kAr ? "ar" : "fm"; }

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "ar") return Paradigm::kAr;
  if (s == "fm") return Paradigm::kFm;
  throw Error(ErrorKind::kConfig, "unknown paradigm '" + s + "' (expected ar or fm)");
}

/// Architecture knobs shared by both paradigms.
struct ModelShape {
  int n_blocks = 4;
  int model_dim = 128;
  int n_heads = 4;
  int ff_dim = 512;
  int cond_emb_dim = 8;  // per control stream
  int max_len = 512;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct ModelSpec {
  Paradigm paradigm = Paradigm::kAr;
  ModelShape shape;
  WorldSpec world;
  NormStats norm;  // FM only

  nn::BackboneConfig backbone() const {
    nn::BackboneConfig c;
    c.n_blocks = shape.n_blocks;
    c.model_dim = shape.model_dim;
    c.n_heads = shape.n_heads;
    c.ff_dim = shape.ff_dim;
    c.max_len = shape.max_len;
    c.caption_vocab = CaptionVocab::kSize;
    c.cond_dim = kNumStreams * shape.cond_emb_dim;
    if (paradigm == Paradigm::kAr) {
      c.mode = nn::AttnMode::kCausal;
      c.n_books = world.n_codebooks;
      c.token_vocab = world.vocab().total();
      c.out_vocab = world.vocab().total();
    } else {
      c.mode = nn::AttnMode::kBidirectional;
      c.input_dim = world.latent_dim;
    }
    return c;
  }
};

/// Backbone + condition embedder over one flat parameter buffer.
class Model {
 public:
  explicit Model(const ModelSpec& spec)
      : spec_(spec),
        layout_(std::make_unique<nn::ParamLayout>()),
        net_(spec.backbone(), *layout_, "net."),
        cond_(spec.world, spec.shape.cond_emb_dim, *layout_) {}

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelSpec& spec() const noexcept { return spec_; }
  Paradigm paradigm() const noexcept { return spec_.paradigm; }
  const nn::ParamLayout& layout() const noexcept { return *layout_; }
  const nn::Backbone& net() const noexcept { return net_; }
  const CondEmbedder& cond() const noexcept { return cond_; }

  void init_params(std::uint64_t seed) { params = layout_->initialize(SeededRng(seed, 0x1a17)); }

  nn::ParamVec params;

 private:
  ModelSpec spec_;
  std::unique_ptr<nn::ParamLayout> layout_;
  nn::Backbone net_;
  CondEmbedder cond_;
};

/// Caption fed to the backbone; a dropped caption is the single null token.
inline std::vector<int> effective_caption(const std::vector<int>& caption, bool dropped) {
  if (dropped || caption.empty()) return {CaptionVocab::kNull};
  return caption;
}

}  // namespace arfm
