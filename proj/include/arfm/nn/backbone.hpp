#pragma once

// Tiny pre-norm transformer shared by both paradigms.
//
// Input layer: per-frame features (summed token embeddings for AR, latent
// vectors for FM) are concatenated with the condition grid over the channel
// axis and linearly projected to model_dim; learned absolute positions are
// added, plus a sinusoidal timestep embedding in FM mode.
//
// Block: x + SelfAttn(LN(x)) -> + CrossAttn(LN(.), caption) -> + FF(LN(.)).
// In bidirectional mode, with 2N blocks, block i >= N+1 (1-indexed) takes
// Linear(Concat(x, out_{2N-i})) as input, where out_0 is the embedding output.
//
// Everything is templated on the scalar so gradients can be checked in double.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arfm/nn/params.hpp"

namespace arfm::nn {

enum class AttnMode { kCausal, kBidirectional };

inline const char* to_string(AttnMode m) { return m == AttnMode::kCausal ? "causal" : "bidirectional"; }

struct BackboneConfig {
  int n_blocks = 4;
  int model_dim = 128;
  int n_heads = 4;
  int ff_dim = 512;
  AttnMode mode = AttnMode::kCausal;
  // Token input (AR): n_books streams over token_vocab ids; out_vocab logits per book.
  int n_books = 0;
  int token_vocab = 0;
  int out_vocab = 0;
  // Vector input (FM).
  int input_dim = 0;
  int cond_dim = 0;
  int caption_vocab = 64;
  int max_len = 512;

  bool token_input() const { return n_books > 0; }
  bool skips() const { return mode == AttnMode::kBidirectional; }
  int in_dim() const { return (token_input() ? model_dim : input_dim) + cond_dim; }
  int out_dim() const { return token_input() ? n_books * out_vocab : input_dim; }
  int head_dim() const { return model_dim / n_heads; }

  void validate() const {
    ARFM_CHECK(n_blocks >= 2 && n_blocks % 2 == 0, ErrorKind::kConfig,
               "backbone: n_blocks must be even and >= 2");
    ARFM_CHECK(model_dim > 0 && n_heads > 0 && model_dim % n_heads == 0, ErrorKind::kConfig,
               "backbone: model_dim must be divisible by n_heads");
    ARFM_CHECK(ff_dim > 0 && max_len > 0 && caption_vocab > 0 && cond_dim >= 0, ErrorKind::kConfig,
               "backbone: invalid sizes");
    ARFM_CHECK(token_input() ? (token_vocab > 0 && out_vocab > 0 && input_dim == 0) : input_dim > 0,
               ErrorKind::kConfig, "backbone: set either token input or vector input");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// One sequence worth of model input.
template <class T>
struct SeqInput {
  std::vector<int> tokens;  // [L x n_books], token mode
  Mat<T> features;          // [L x input_dim], vector mode
  Mat<T> cond;              // [L x cond_dim]
  std::vector<int> caption;
  std::optional<T> tau;     // required in vector mode

  std::size_t length(const BackboneConfig& c) const {
    return c.token_input() ? tokens.size() / std::size_t(c.n_books) : std::size_t(features.rows());
  }
};

template <class T>
struct LnTrace {
  Mat<T> xhat;
  ColVec<T> rstd;
};

template <class T>
struct AttnTrace {
  Mat<T> q, k, v, ctx;
  std::vector<Mat<T>> probs;
};

template <class T>
struct BlockTrace {
  Mat<T> skip_cat, u, a, h1, c, h2, f, pre, act;
  LnTrace<T> ln1, ln2, ln3;
  AttnTrace<T> self, cross;
};

template <class T>
struct ForwardTrace {
  std::vector<int> tokens, caption;
  Mat<T> feat, mem, xf;
  std::vector<Mat<T>> outs;  // outs[0] = embedding output, outs[b+1] = block b output
  std::vector<BlockTrace<T>> blocks;
  LnTrace<T> lnf;
  std::size_t length = 0;
};

/// Per-stream incremental decoding state (causal mode only).
template <class T>
struct KvCache {
  std::vector<Mat<T>> k, v;    // [max_len x d] per block
  std::vector<Mat<T>> ck, cv;  // caption keys/values per block
  std::size_t pos = 0;
};

/// One new position for one stream in incremental decoding.
struct StepInput {
  std::span<const int> tokens;  // n_books ids
  std::span<const float> cond;  // cond_dim values
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr Eigen::Index kRowBlock = 64;

template <class T, class G, class B>
void ln_forward(const Mat<T>& x, const G& g, const B& b, Mat<T>& y, LnTrace<T>& tr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  tr.xhat.resize(n, d);
  tr.rstd.resize(n);
  y.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = x.row(i).mean();
    const T var = (x.row(i).array() - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + T(kLnEps));
    tr.rstd(i) = rs;
    tr.xhat.row(i) = (x.row(i).array() - mu) * rs;
    y.row(i) = tr.xhat.row(i).cwiseProduct(g) + b;
  }
}

template <class T, class G>
void ln_backward(const Mat<T>& dy, const LnTrace<T>& tr, const G& g, T* dg, T* db, Mat<T>& dx) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Eigen::Map<RowVec<T>> dgm(dg, d), dbm(db, d);
  dgm += dy.cwiseProduct(tr.xhat).colwise().sum();
  dbm += dy.colwise().sum();
  dx.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxh = dy.row(i).cwiseProduct(g);
    const T m1 = dxh.mean();
    const T m2 = dxh.cwiseProduct(tr.xhat.row(i)).mean();
    dx.row(i) = tr.rstd(i) * (dxh.array() - m1 - tr.xhat.row(i).array() * m2).matrix();
  }
}

// Row-wise softmax of s (in place) over the first `lim(i)` columns; the rest are zeroed.
template <class T, class Lim>
void softmax_rows(Eigen::Ref<Mat<T>> s, Lim lim) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index n = lim(i);
    auto r = s.row(i).head(n).array();
    r = (r - r.maxCoeff()).exp();
    r *= T(1) / r.sum();
    s.row(i).tail(s.cols() - n).setZero();
  }
}

template <class A>
auto gelu_tanh_arg(const A& x) {
  using T = typename A::Scalar;
  return (T(0.7978845608028654) * (x + T(0.044715) * x * x * x)).tanh();
}

template <class T>
Mat<T> gelu(const Mat<T>& x) {
  const auto a = x.array();
  return (T(0.5) * a * (T(1) + gelu_tanh_arg(a))).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& x) {
  const auto a = x.array();
  const auto th = gelu_tanh_arg(a).eval();
  return (T(0.5) * (T(1) + th) +
          T(0.5) * a * (T(1) - th * th) * T(0.7978845608028654) * (T(1) + T(3 * 0.044715) * a * a))
      .matrix();
}

}  // namespace detail

class Backbone {
 public:
  struct AttnIdx {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct BlockIdx {
    std::size_t ln1g, ln1b, ln2g, ln2b, ln3g, ln3b, w1, b1, w2, b2;
    AttnIdx self, cross;
    std::optional<std::size_t> skip_w, skip_b;
    int skip_src = -1;  // index into outs
  };

  /// Registers the backbone parameters under `prefix` in `layout`.
  Backbone(const BackboneConfig& cfg, ParamLayout& layout, const std::string& prefix = "")
      : cfg_(cfg), layout_(&layout) {
    cfg_.validate();
    const auto d = std::size_t(cfg.model_dim);
    const float res_std = 0.5f / std::sqrt(float(cfg.n_blocks));
    auto lin = [&](const std::string& n, std::size_t out, std::size_t in, float scale = 1.0f) {
      return layout.add(prefix + n, out, in, {ParamInit::kNormal, scale / std::sqrt(float(in))});
    };
    auto zeros = [&](const std::string& n, std::size_t len) {
      return layout.add(prefix + n, 1, len, {ParamInit::kZeros});
    };
    auto ones = [&](const std::string& n, std::size_t len) {
      return layout.add(prefix + n, 1, len, {ParamInit::kOnes});
    };
    if (cfg.token_input())
      tok_emb_ = layout.add(prefix + "tok_emb", std::size_t(cfg.n_books) * cfg.token_vocab, d,
                            {ParamInit::kNormal, 1.0f});
    in_w_ = lin("in.w", d, std::size_t(cfg.in_dim()));
    in_b_ = zeros("in.b", d);
    pos_emb_ = layout.add(prefix + "pos_emb", std::size_t(cfg.max_len), d, {ParamInit::kNormal, 0.1f});
    cap_emb_ = layout.add(prefix + "cap_emb", std::size_t(cfg.caption_vocab), d, {ParamInit::kNormal, 1.0f});
    auto attn = [&](const std::string& n) {
      AttnIdx a{};
      a.wq = lin(n + ".wq", d, d);
      a.bq = zeros(n + ".bq", d);
      a.wk = lin(n + ".wk", d, d);
      a.bk = zeros(n + ".bk", d);
      a.wv = lin(n + ".wv", d, d);
      a.bv = zeros(n + ".bv", d);
      a.wo = lin(n + ".wo", d, d, res_std);
      a.bo = zeros(n + ".bo", d);
      return a;
    };
    const int half = cfg.n_blocks / 2;
    for (int b = 0; b < cfg.n_blocks; ++b) {
      const std::string n = "blk" + std::to_string(b);
      BlockIdx bi{};
      const int i1 = b + 1;  // 1-indexed block number
      if (cfg.skips() && i1 >= half + 1) {
        bi.skip_src = cfg.n_blocks - i1;
        bi.skip_w = layout.add(prefix + n + ".skip.w", d, 2 * d, {ParamInit::kLeftIdentity, 0.02f});
        bi.skip_b = zeros(n + ".skip.b", d);
      }
      bi.ln1g = ones(n + ".ln1.g", d);
      bi.ln1b = zeros(n + ".ln1.b", d);
      bi.self = attn(n + ".attn");
      bi.ln2g = ones(n + ".ln2.g", d);
      bi.ln2b = zeros(n + ".ln2.b", d);
      bi.cross = attn(n + ".xattn");
      bi.ln3g = ones(n + ".ln3.g", d);
      bi.ln3b = zeros(n + ".ln3.b", d);
      bi.w1 = lin(n + ".ff.w1", std::size_t(cfg.ff_dim), d);
      bi.b1 = zeros(n + ".ff.b1", std::size_t(cfg.ff_dim));
      bi.w2 = lin(n + ".ff.w2", d, std::size_t(cfg.ff_dim), res_std);
      bi.b2 = zeros(n + ".ff.b2", d);
      blocks_.push_back(bi);
    }
    lnf_g_ = ones("lnf.g", d);
    lnf_b_ = zeros("lnf.b", d);
    head_w_ = layout.add(prefix + "head.w", std::size_t(cfg.out_dim()), d, {ParamInit::kNormal, 0.02f});
    head_b_ = zeros("head.b", std::size_t(cfg.out_dim()));
  }

  const BackboneConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return *layout_; }

  // -------------------------------------------------------------------------
  // Full-sequence forward. Fills `tr` when non-null (needed by backward).

  template <class T>
  Mat<T> forward(const T* p, const SeqInput<T>& in, ForwardTrace<T>* tr = nullptr) const {
    ForwardTrace<T> local;
    ForwardTrace<T>& t = tr ? *tr : local;
    const std::size_t len = in.length(cfg_);
    check_input(in, len);
    t.length = len;
    t.tokens = in.tokens;
    t.caption = in.caption.empty() ? std::vector<int>{0} : in.caption;
    t.feat = input_features(p, in, len);
    t.mem = caption_memory(p, t.caption);

    t.outs.assign(std::size_t(cfg_.n_blocks) + 1, Mat<T>());
    t.outs[0] = embed(p, t.feat, 0, in.tau);
    t.blocks.assign(std::size_t(cfg_.n_blocks), BlockTrace<T>());
    for (int b = 0; b < cfg_.n_blocks; ++b) {
      const BlockIdx& bi = blocks_[b];
      BlockTrace<T>& bt = t.blocks[b];
      if (bi.skip_w) {
        bt.skip_cat.resize(Eigen::Index(len), 2 * cfg_.model_dim);
        bt.skip_cat << t.outs[b], t.outs[bi.skip_src];
        linear(p, bt.skip_cat, *bi.skip_w, *bi.skip_b, bt.u);
      } else {
        bt.u = t.outs[b];
      }
      block_forward(p, bi, t.mem, bt, t.outs[b + 1]);
    }
    Mat<T> y;
    detail::ln_forward(t.outs.back(), pvec(*layout_, p, lnf_g_), pvec(*layout_, p, lnf_b_), t.xf, t.lnf);
    linear(p, t.xf, head_w_, head_b_, y);
    return y;
  }

  // -------------------------------------------------------------------------
  // Reverse mode. Accumulates into `g` (same layout as p). Returns d(cond).

  template <class T>
  Mat<T> backward(const T* p, const ForwardTrace<T>& t, const Mat<T>& d_out, T* g) const {
    const ParamLayout& L = *layout_;
    const auto d = Eigen::Index(cfg_.model_dim);
    std::vector<Mat<T>> d_outs(t.outs.size());
    for (std::size_t i = 0; i < d_outs.size(); ++i) d_outs[i] = Mat<T>::Zero(Eigen::Index(t.length), d);

    Mat<T> d_xf;
    linear_backward(p, g, t.xf, d_out, head_w_, head_b_, &d_xf);
    Mat<T> dx;
    detail::ln_backward(d_xf, t.lnf, pvec(L, p, lnf_g_), g + L.at(lnf_g_).offset, g + L.at(lnf_b_).offset, dx);
    d_outs.back() += dx;

    Mat<T> d_mem = Mat<T>::Zero(t.mem.rows(), d);
    for (int b = cfg_.n_blocks - 1; b >= 0; --b) {
      const BlockIdx& bi = blocks_[b];
      const BlockTrace<T>& bt = t.blocks[b];
      Mat<T> du;
      block_backward(p, g, bi, t.mem, bt, d_outs[b + 1], du, d_mem);
      if (bi.skip_w) {
        Mat<T> dcat;
        linear_backward(p, g, bt.skip_cat, du, *bi.skip_w, *bi.skip_b, &dcat);
        d_outs[b] += dcat.leftCols(d);
        d_outs[bi.skip_src] += dcat.rightCols(d);
      } else {
        d_outs[b] += du;
      }
    }

    // Caption memory rows: per-token embeddings followed by their mean.
    {
      auto dcap = pmat(L, g, cap_emb_);
      const Eigen::Index nc = Eigen::Index(t.caption.size());
      for (Eigen::Index i = 0; i < nc; ++i)
        dcap.row(t.caption[i]) += d_mem.row(i) + d_mem.row(nc) / T(nc);
    }

    // Embedding layer.
    const Mat<T>& dx0 = d_outs[0];
    pmat(L, g, pos_emb_).topRows(Eigen::Index(t.length)) += dx0;
    Mat<T> dfeat;
    linear_backward(p, g, t.feat, dx0, in_w_, in_b_, &dfeat);
    if (cfg_.token_input()) {
      auto demb = pmat(L, g, *tok_emb_);
      for (std::size_t j = 0; j < t.length; ++j)
        for (int k = 0; k < cfg_.n_books; ++k)
          demb.row(Eigen::Index(k) * cfg_.token_vocab + t.tokens[j * cfg_.n_books + k]) +=
              dfeat.row(Eigen::Index(j)).leftCols(d);
    }
    return dfeat.rightCols(cfg_.cond_dim);
  }

  // -------------------------------------------------------------------------
  // Incremental decoding (causal mode).

  template <class T>
  KvCache<T> make_cache(const T* p, const std::vector<int>& caption) const {
    ARFM_CHECK(cfg_.mode == AttnMode::kCausal, ErrorKind::kInvalidArgument,
               "kv cache requires causal mode");
    KvCache<T> c;
    const Mat<T> mem = caption_memory(p, caption.empty() ? std::vector<int>{0} : caption);
    for (const BlockIdx& bi : blocks_) {
      c.k.push_back(Mat<T>::Zero(cfg_.max_len, cfg_.model_dim));
      c.v.push_back(Mat<T>::Zero(cfg_.max_len, cfg_.model_dim));
      Mat<T> ck, cv;
      linear(p, mem, bi.cross.wk, bi.cross.bk, ck);
      linear(p, mem, bi.cross.wv, bi.cross.bv, cv);
      c.ck.push_back(std::move(ck));
      c.cv.push_back(std::move(cv));
    }
    return c;
  }

  /// Appends one position to each stream and returns its outputs, one row per stream.
  template <class T>
  Mat<T> decode_step(const T* p, std::span<KvCache<T>* const> caches,
                     std::span<const StepInput> steps) const {
    const ParamLayout& L = *layout_;
    const auto ns = Eigen::Index(caches.size());
    const auto d = Eigen::Index(cfg_.model_dim);
    ARFM_CHECK(steps.size() == caches.size(), ErrorKind::kShape, "decode_step: stream count mismatch");
    Mat<T> feat(ns, cfg_.in_dim());
    for (Eigen::Index s = 0; s < ns; ++s) {
      ARFM_CHECK(caches[s]->pos < std::size_t(cfg_.max_len), ErrorKind::kInvalidArgument,
                 "decode_step: sequence exceeds max_len");
      ARFM_CHECK(steps[s].tokens.size() == std::size_t(cfg_.n_books) &&
                     steps[s].cond.size() == std::size_t(cfg_.cond_dim),
                 ErrorKind::kShape, "decode_step: bad step input");
      feat.row(s).leftCols(d) = token_embedding(p, steps[s].tokens);
      for (int q = 0; q < cfg_.cond_dim; ++q) feat(s, d + q) = T(steps[s].cond[q]);
    }
    Mat<T> x;
    linear(p, feat, in_w_, in_b_, x);
    for (Eigen::Index s = 0; s < ns; ++s) x.row(s) += pmat(L, p, pos_emb_).row(Eigen::Index(caches[s]->pos));

    const int nh = cfg_.n_heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));
    LnTrace<T> scratch;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const BlockIdx& bi = blocks_[b];
      Mat<T> a, q, k, v;
      detail::ln_forward(x, pvec(L, p, bi.ln1g), pvec(L, p, bi.ln1b), a, scratch);
      linear(p, a, bi.self.wq, bi.self.bq, q);
      linear(p, a, bi.self.wk, bi.self.bk, k);
      linear(p, a, bi.self.wv, bi.self.bv, v);
      Mat<T> ctx(ns, d);
      for (Eigen::Index s = 0; s < ns; ++s) {
        KvCache<T>& c = *caches[s];
        const auto pos = Eigen::Index(c.pos);
        c.k[b].row(pos) = k.row(s);
        c.v[b].row(pos) = v.row(s);
        single_query_attention<T>(q.row(s), c.k[b].topRows(pos + 1), c.v[b].topRows(pos + 1), nh, dh,
                                  scale, ctx.row(s));
      }
      Mat<T> o;
      linear(p, ctx, bi.self.wo, bi.self.bo, o);
      x += o;
      Mat<T> cn, cq;
      detail::ln_forward(x, pvec(L, p, bi.ln2g), pvec(L, p, bi.ln2b), cn, scratch);
      linear(p, cn, bi.cross.wq, bi.cross.bq, cq);
      for (Eigen::Index s = 0; s < ns; ++s) {
        KvCache<T>& c = *caches[s];
        single_query_attention<T>(cq.row(s), c.ck[b], c.cv[b], nh, dh, scale, ctx.row(s));
      }
      linear(p, ctx, bi.cross.wo, bi.cross.bo, o);
      x += o;
      Mat<T> f, pre;
      detail::ln_forward(x, pvec(L, p, bi.ln3g), pvec(L, p, bi.ln3b), f, scratch);
      linear(p, f, bi.w1, bi.b1, pre);
      pre = detail::gelu(pre);
      linear(p, pre, bi.w2, bi.b2, o);
      x += o;
    }
    for (Eigen::Index s = 0; s < ns; ++s) ++caches[s]->pos;
    Mat<T> xf, y;
    detail::ln_forward(x, pvec(L, p, lnf_g_), pvec(L, p, lnf_b_), xf, scratch);
    linear(p, xf, head_w_, head_b_, y);
    return y;
  }

  std::size_t param_count() const { return layout_->total(); }

 private:
  template <class T>
  void check_input(const SeqInput<T>& in, std::size_t len) const {
    ARFM_CHECK(len >= 1 && len <= std::size_t(cfg_.max_len), ErrorKind::kInvalidArgument,
               "backbone: sequence length " + std::to_string(len) + " outside [1, " +
                   std::to_string(cfg_.max_len) + "]");
    ARFM_CHECK(cfg_.cond_dim == 0 || (std::size_t(in.cond.rows()) == len && in.cond.cols() == cfg_.cond_dim),
               ErrorKind::kShape, "backbone: condition grid does not match sequence");
    if (cfg_.token_input()) {
      ARFM_CHECK(in.tokens.size() == len * std::size_t(cfg_.n_books), ErrorKind::kShape,
                 "backbone: token input size");
    } else {
      ARFM_CHECK(in.features.cols() == cfg_.input_dim, ErrorKind::kShape, "backbone: feature width");
      ARFM_CHECK(in.tau.has_value(), ErrorKind::kInvalidArgument,
                 "backbone: timestep is required for vector-input (flow) mode");
    }
    for (int id : in.caption)
      ARFM_CHECK(id >= 0 && id < cfg_.caption_vocab, ErrorKind::kInvalidArgument, "backbone: caption id");
  }

  template <class T>
  RowVec<T> token_embedding(const T* p, std::span<const int> ids) const {
    auto emb = pmat(*layout_, p, *tok_emb_);
    RowVec<T> e = RowVec<T>::Zero(cfg_.model_dim);
    for (int k = 0; k < cfg_.n_books; ++k) {
      ARFM_CHECK(ids[k] >= 0 && ids[k] < cfg_.token_vocab, ErrorKind::kInvalidArgument,
                 "backbone: token id out of range");
      e += emb.row(Eigen::Index(k) * cfg_.token_vocab + ids[k]);
    }
    return e;
  }

  template <class T>
  Mat<T> input_features(const T* p, const SeqInput<T>& in, std::size_t len) const {
    const auto n = Eigen::Index(len);
    Mat<T> feat(n, cfg_.in_dim());
    if (cfg_.token_input()) {
      for (std::size_t j = 0; j < len; ++j)
        feat.row(Eigen::Index(j)).leftCols(cfg_.model_dim) = token_embedding(
            p, std::span<const int>(in.tokens.data() + j * std::size_t(cfg_.n_books), std::size_t(cfg_.n_books)));
    } else {
      feat.leftCols(cfg_.input_dim) = in.features;
    }
    if (cfg_.cond_dim > 0) feat.rightCols(cfg_.cond_dim) = in.cond;
    return feat;
  }

  template <class T>
  Mat<T> caption_memory(const T* p, const std::vector<int>& caption) const {
    auto emb = pmat(*layout_, p, cap_emb_);
    const auto nc = Eigen::Index(caption.size());
    Mat<T> mem(nc + 1, cfg_.model_dim);
    for (Eigen::Index i = 0; i < nc; ++i) mem.row(i) = emb.row(caption[i]);
    mem.row(nc) = mem.topRows(nc).colwise().mean();
    return mem;
  }

  template <class T>
  Mat<T> embed(const T* p, const Mat<T>& feat, std::size_t pos0, const std::optional<T>& tau) const {
    Mat<T> x;
    linear(p, feat, in_w_, in_b_, x);
    x += pmat(*layout_, p, pos_emb_).middleRows(Eigen::Index(pos0), x.rows());
    if (!cfg_.token_input()) x.rowwise() += timestep_embedding<T>(*tau);
    return x;
  }

 public:
  /// Fixed sinusoidal embedding of a flow time in [0, 1].
  template <class T>
  RowVec<T> timestep_embedding(T tau) const {
    const int d = cfg_.model_dim, half = d / 2;
    RowVec<T> e = RowVec<T>::Zero(d);
    for (int i = 0; i < half; ++i) {
      const T freq = std::exp(-std::log(T(10000)) * T(i) / T(half));
      e(i) = std::sin(T(1000) * tau * freq);
      e(half + i) = std::cos(T(1000) * tau * freq);
    }
    return e;
  }

 private:
  template <class T>
  void linear(const T* p, const Mat<T>& x, std::size_t w, std::size_t b, Mat<T>& y) const {
    y.noalias() = x * pmat(*layout_, p, w).transpose();
    y.rowwise() += pvec(*layout_, p, b);
  }

  template <class T>
  void linear_backward(const T* p, T* g, const Mat<T>& x, const Mat<T>& dy, std::size_t w, std::size_t b,
                       Mat<T>* dx) const {
    pmat(*layout_, g, w).noalias() += dy.transpose() * x;
    pvec(*layout_, g, b) += dy.colwise().sum();
    if (dx) dx->noalias() = dy * pmat(*layout_, p, w);
  }

  template <class T, class Q, class K, class V, class Out>
  static void single_query_attention(const Q& q, const K& k, const V& v, int nh, int dh, T scale, Out&& out) {
    const Eigen::Index m = k.rows();
    RowVec<T> sc(m);
    for (int h = 0; h < nh; ++h) {
      sc.noalias() = (q.segment(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
      const T mx = sc.maxCoeff();
      sc = (sc.array() - mx).exp();
      sc /= sc.sum();
      out.segment(h * dh, dh).noalias() = sc * v.middleCols(h * dh, dh);
    }
  }

  template <class T>
  void attention_forward(const T* p, const AttnIdx& ai, const Mat<T>& xq, const Mat<T>& xkv, bool causal,
                         AttnTrace<T>& tr, Mat<T>& out) const {
    linear(p, xq, ai.wq, ai.bq, tr.q);
    linear(p, xkv, ai.wk, ai.bk, tr.k);
    linear(p, xkv, ai.wv, ai.bv, tr.v);
    const Eigen::Index n = xq.rows(), m = xkv.rows();
    const int nh = cfg_.n_heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));
    tr.ctx.resize(n, cfg_.model_dim);
    tr.probs.assign(std::size_t(nh), Mat<T>());
    for (int h = 0; h < nh; ++h) {
      Mat<T>& P = tr.probs[h];
      P.setZero(n, m);
      for (Eigen::Index r0 = 0; r0 < n; r0 += detail::kRowBlock) {
        const Eigen::Index rb = std::min(detail::kRowBlock, n - r0);
        const Eigen::Index e = causal ? r0 + rb : m;
        auto S = P.block(r0, 0, rb, e);
        S.noalias() = tr.q.block(r0, h * dh, rb, dh) * tr.k.block(0, h * dh, e, dh).transpose();
        S *= scale;
        detail::softmax_rows<T>(S, [&](Eigen::Index i) { return causal ? r0 + i + 1 : e; });
        tr.ctx.block(r0, h * dh, rb, dh).noalias() = S * tr.v.block(0, h * dh, e, dh);
      }
    }
    linear(p, tr.ctx, ai.wo, ai.bo, out);
  }

  template <class T>
  void attention_backward(const T* p, T* g, const AttnIdx& ai, const Mat<T>& xq, const Mat<T>& xkv,
                          bool causal, const AttnTrace<T>& tr, const Mat<T>& d_out, Mat<T>& d_xq,
                          Mat<T>& d_xkv) const {
    Mat<T> dctx;
    linear_backward(p, g, tr.ctx, d_out, ai.wo, ai.bo, &dctx);
    const Eigen::Index n = xq.rows(), m = xkv.rows();
    const int nh = cfg_.n_heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));
    Mat<T> dq = Mat<T>::Zero(n, cfg_.model_dim), dk = Mat<T>::Zero(m, cfg_.model_dim),
           dv = Mat<T>::Zero(m, cfg_.model_dim);
    Mat<T> dS;
    for (int h = 0; h < nh; ++h) {
      for (Eigen::Index r0 = 0; r0 < n; r0 += detail::kRowBlock) {
        const Eigen::Index rb = std::min(detail::kRowBlock, n - r0);
        const Eigen::Index e = causal ? r0 + rb : m;
        const auto P = tr.probs[h].block(r0, 0, rb, e);
        const auto dc = dctx.block(r0, h * dh, rb, dh);
        dS.noalias() = dc * tr.v.block(0, h * dh, e, dh).transpose();
        dv.block(0, h * dh, e, dh).noalias() += P.transpose() * dc;
        const ColVec<T> rs = dS.cwiseProduct(P).rowwise().sum();
        dS = (P.array() * (dS.colwise() - rs).array()).matrix() * scale;
        dq.block(r0, h * dh, rb, dh).noalias() = dS * tr.k.block(0, h * dh, e, dh);
        dk.block(0, h * dh, e, dh).noalias() += dS.transpose() * tr.q.block(r0, h * dh, rb, dh);
      }
    }
    Mat<T> tmp;
    linear_backward(p, g, xq, dq, ai.wq, ai.bq, &d_xq);
    linear_backward(p, g, xkv, dk, ai.wk, ai.bk, &d_xkv);
    linear_backward(p, g, xkv, dv, ai.wv, ai.bv, &tmp);
    d_xkv += tmp;
  }

  template <class T>
  void block_forward(const T* p, const BlockIdx& bi, const Mat<T>& mem, BlockTrace<T>& bt, Mat<T>& out) const {
    const ParamLayout& L = *layout_;
    const bool causal = cfg_.mode == AttnMode::kCausal;
    Mat<T> o;
    detail::ln_forward(bt.u, pvec(L, p, bi.ln1g), pvec(L, p, bi.ln1b), bt.a, bt.ln1);
    attention_forward(p, bi.self, bt.a, bt.a, causal, bt.self, o);
    bt.h1 = bt.u + o;
    detail::ln_forward(bt.h1, pvec(L, p, bi.ln2g), pvec(L, p, bi.ln2b), bt.c, bt.ln2);
    attention_forward(p, bi.cross, bt.c, mem, false, bt.cross, o);
    bt.h2 = bt.h1 + o;
    detail::ln_forward(bt.h2, pvec(L, p, bi.ln3g), pvec(L, p, bi.ln3b), bt.f, bt.ln3);
    linear(p, bt.f, bi.w1, bi.b1, bt.pre);
    bt.act = detail::gelu(bt.pre);
    linear(p, bt.act, bi.w2, bi.b2, o);
    out = bt.h2 + o;
  }

  template <class T>
  void block_backward(const T* p, T* g, const BlockIdx& bi, const Mat<T>& mem, const BlockTrace<T>& bt,
                      const Mat<T>& d_out, Mat<T>& d_u, Mat<T>& d_mem) const {
    const ParamLayout& L = *layout_;
    const bool causal = cfg_.mode == AttnMode::kCausal;
    auto lng = [&](std::size_t i) { return g + L.at(i).offset; };

    Mat<T> d_act, d_f, tmp;
    linear_backward(p, g, bt.act, d_out, bi.w2, bi.b2, &d_act);
    const Mat<T> d_pre = d_act.cwiseProduct(detail::gelu_grad(bt.pre));
    linear_backward(p, g, bt.f, d_pre, bi.w1, bi.b1, &d_f);
    detail::ln_backward(d_f, bt.ln3, pvec(L, p, bi.ln3g), lng(bi.ln3g), lng(bi.ln3b), tmp);
    Mat<T> d_h2 = d_out + tmp;

    Mat<T> d_c, d_m;
    attention_backward(p, g, bi.cross, bt.c, mem, false, bt.cross, d_h2, d_c, d_m);
    d_mem += d_m;
    detail::ln_backward(d_c, bt.ln2, pvec(L, p, bi.ln2g), lng(bi.ln2g), lng(bi.ln2b), tmp);
    Mat<T> d_h1 = d_h2 + tmp;

    Mat<T> d_aq, d_akv;
    attention_backward(p, g, bi.self, bt.a, bt.a, causal, bt.self, d_h1, d_aq, d_akv);
    d_aq += d_akv;
    detail::ln_backward(d_aq, bt.ln1, pvec(L, p, bi.ln1g), lng(bi.ln1g), lng(bi.ln1b), tmp);
    d_u = d_h1 + tmp;
  }

  BackboneConfig cfg_;
  const ParamLayout* layout_;
  std::optional<std::size_t> tok_emb_;
  std::size_t in_w_{}, in_b_{}, pos_emb_{}, cap_emb_{}, lnf_g_{}, lnf_b_{}, head_w_{}, head_b_{};
  std::vector<BlockIdx> blocks_;
};

}  // namespace arfm::nn
