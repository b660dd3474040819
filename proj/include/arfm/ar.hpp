#pragma once

// Auto-regressive paradigm over delayed codebook streams.
//
// Sequence layout: the delayed grid D has F + N_q - 1 columns for F frames.
// Input position 0 holds the start token on every book, position p > 0 holds
// column p - 1 of D, and the output at position p predicts column p. The
// condition of frame t sits at input position t, one step before the frame's
// first token enters the model.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "arfm/delay.hpp"
#include "arfm/model.hpp"

namespace arfm::ar {

using nn::Mat;

enum class CeMode { kPaper, kStandard };

struct CeResult {
  double loss = 0.0;
  std::size_t cells = 0;
};

/// Cross-entropy over the non-PAD cells of `target` (books x positions).
/// `logits` is [positions, books * vocab]. Standard mode averages over cells;
/// paper mode further divides by the codebook cardinality. When `grad` is
/// non-null it receives d(loss)/d(logits).
inline CeResult ce_loss(const Mat<float>& logits, const TokenGrid& target, int vocab, int card, CeMode mode,
                        Mat<float>* grad = nullptr) {
  const auto nq = Eigen::Index(target.n_books());
  const auto n = Eigen::Index(target.length());
  ARFM_CHECK(logits.rows() == n && logits.cols() == nq * vocab, ErrorKind::kShape,
             "ce_loss: logits shape does not match the target grid");
  ARFM_CHECK(card > 0, ErrorKind::kInvalidArgument, "ce_loss: card must be positive");
  const int pad = card;
  if (grad) grad->setZero(n, nq * vocab);
  double total = 0.0;
  std::size_t cells = 0;
  for (Eigen::Index k = 0; k < nq; ++k)
    for (Eigen::Index c = 0; c < n; ++c)
      if (target.at(std::size_t(k), std::size_t(c)) != pad) ++cells;
  if (cells == 0) return {};
  const double norm = mode == CeMode::kPaper ? double(cells) * double(card) : double(cells);
  for (Eigen::Index c = 0; c < n; ++c) {
    for (Eigen::Index k = 0; k < nq; ++k) {
      const int tgt = target.at(std::size_t(k), std::size_t(c));
      if (tgt == pad) continue;
      ARFM_CHECK(tgt >= 0 && tgt < vocab, ErrorKind::kInvalidArgument, "ce_loss: target id outside logits");
      const auto row = logits.row(c).segment(k * vocab, vocab);
      const float mx = row.maxCoeff();
      double z = 0.0;
      for (int v = 0; v < vocab; ++v) z += std::exp(double(row(v) - mx));
      const double lse = double(mx) + std::log(z);
      total += lse - double(row(tgt));
      if (grad) {
        auto g = grad->row(c).segment(k * vocab, vocab);
        for (int v = 0; v < vocab; ++v) g(v) = float(std::exp(double(row(v)) - lse) / norm);
        g(tgt) -= float(1.0 / norm);
      }
    }
  }
  return {total / norm, cells};
}

// ---------------------------------------------------------------------------
// Sampling filters.

struct ArSamplerConfig {
  double temperature = 1.0;
  std::optional<int> top_k;
  std::optional<double> top_p;
  double cfg_coef = 3.0;
  std::size_t max_frames = 0;  // 0: caller decides

  static constexpr double kGreedyBelow = 1e-4;

  void validate() const {
    ARFM_CHECK(!(top_k && top_p), ErrorKind::kConfig, "ar sampler: set at most one of top_k and top_p");
    ARFM_CHECK(temperature > 0.0, ErrorKind::kConfig, "ar sampler: temperature must be > 0");
    ARFM_CHECK(cfg_coef >= 0.0, ErrorKind::kConfig, "ar sampler: cfg_coef must be >= 0");
    ARFM_CHECK(!top_k || *top_k >= 1, ErrorKind::kConfig, "ar sampler: top_k must be >= 1");
    ARFM_CHECK(!top_p || (*top_p > 0.0 && *top_p <= 1.0), ErrorKind::kConfig, "ar sampler: top_p must lie in (0, 1]");
  }
  bool greedy() const { return temperature < kGreedyBelow; }
};

/// Keeps the k most probable ids (ties to the lower id) and renormalizes.
inline std::vector<double> top_k_filter(std::vector<double> probs, int k) {
  if (k >= int(probs.size())) return probs;
  std::vector<int> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  std::vector<double> out(probs.size(), 0.0);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += probs[order[i]];
  for (int i = 0; i < k; ++i) out[order[i]] = probs[order[i]] / s;
  return out;
}

/// Keeps the shortest descending-probability prefix whose mass reaches p.
inline std::vector<double> top_p_filter(std::vector<double> probs, double p) {
  std::vector<int> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  std::vector<double> out(probs.size(), 0.0);
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs[order[keep++]];
    if (cum >= p - 1e-12) break;
  }
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / cum;
  return out;
}

/// Temperature softmax over the allowed ids followed by the configured filter.
inline std::vector<double> sampling_distribution(std::span<const float> logits, const std::vector<bool>& allowed,
                                                 const ArSamplerConfig& cfg) {
  const std::size_t v = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v; ++i)
    if (allowed[i]) mx = std::max(mx, double(logits[i]) / cfg.temperature);
  ARFM_CHECK(std::isfinite(mx), ErrorKind::kNumeric, "sampler: no finite allowed logit");
  std::vector<double> p(v, 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < v; ++i)
    if (allowed[i]) s += (p[i] = std::exp(double(logits[i]) / cfg.temperature - mx));
  for (double& x : p) x /= s;
  if (cfg.top_k) return top_k_filter(std::move(p), *cfg.top_k);
  if (cfg.top_p) return top_p_filter(std::move(p), *cfg.top_p);
  return p;
}

inline int draw(const std::vector<double>& p, SeededRng& rng) {
  const double u = rng.uniform_double();
  double cum = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    cum += p[i];
    last = int(i);
    if (u < cum) return int(i);
  }
  return last;
}

inline int argmax_allowed(std::span<const float> logits, const std::vector<bool>& allowed) {
  int best = -1;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed[i] && (best < 0 || logits[i] > logits[std::size_t(best)])) best = int(i);
  return best;
}

/// uncond + alpha * (cond - uncond), with the endpoints returned exactly.
inline void guide(std::span<const float> cond, std::span<const float> uncond, double alpha, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (alpha == 1.0) out[i] = cond[i];
    else if (alpha == 0.0) out[i] = uncond[i];
    else out[i] = uncond[i] + float(alpha) * (cond[i] - uncond[i]);
  }
}

// ---------------------------------------------------------------------------
// Sequences.

/// Frames plus per-frame condition ids (-1 = null) and the caption.
struct ArSequence {
  TokenGrid frames;
  std::array<std::vector<int>, kNumStreams> cond;
  std::vector<int> caption;
};

inline std::array<std::vector<int>, kNumStreams> control_ids(const ControlSet& c) {
  return {c.chords, c.melody, c.drums};
}

inline ArSequence plain_sequence(const WorldSample& s) {
  return {s.tokens, control_ids(s.controls), s.caption};
}

/// Source frame of every FIM position, -1 for the separators:
/// [<a>, A, <c>, C, <b>, B] with A = [0, s), B = [s, e), C = [e, L).
inline std::vector<int> fim_order(std::size_t len, std::size_t s, std::size_t e) {
  ARFM_CHECK(0 < s && s < e && e < len, ErrorKind::kInvalidArgument,
             "fim: span must satisfy 0 < s < e < L (got s=" + std::to_string(s) + ", e=" + std::to_string(e) +
                 ", L=" + std::to_string(len) + ")");
  std::vector<int> o;
  o.reserve(len + 3);
  o.push_back(-1);
  for (std::size_t j = 0; j < s; ++j) o.push_back(int(j));
  o.push_back(-1);
  for (std::size_t j = e; j < len; ++j) o.push_back(int(j));
  o.push_back(-1);
  for (std::size_t j = s; j < e; ++j) o.push_back(int(j));
  return o;
}

inline TokenGrid fim_prepare(const TokenGrid& tokens, std::size_t s, std::size_t e, const Vocab& vocab) {
  const std::vector<int> order = fim_order(tokens.length(), s, e);
  const int sep[3] = {vocab.fim_a(), vocab.fim_c(), vocab.fim_b()};
  TokenGrid out(tokens.n_books(), order.size());
  int n_sep = 0;
  for (std::size_t c = 0; c < order.size(); ++c) {
    const int id = order[c] < 0 ? sep[n_sep++] : -1;
    for (std::size_t k = 0; k < tokens.n_books(); ++k)
      out.at(k, c) = order[c] < 0 ? id : tokens.at(k, std::size_t(order[c]));
  }
  return out;
}

/// Inverse of fim_prepare.
inline TokenGrid fim_restore(const TokenGrid& fim, std::size_t s, std::size_t e) {
  ARFM_CHECK(fim.length() >= 4, ErrorKind::kShape, "fim_restore: grid too short");
  const std::size_t len = fim.length() - 3;
  const std::vector<int> order = fim_order(len, s, e);
  TokenGrid out(fim.n_books(), len);
  for (std::size_t c = 0; c < order.size(); ++c)
    if (order[c] >= 0)
      for (std::size_t k = 0; k < fim.n_books(); ++k) out.at(k, std::size_t(order[c])) = fim.at(k, c);
  return out;
}

/// FIM training sequence: the prepared grid followed by an EOS column.
inline ArSequence fim_sequence(const WorldSample& smp, std::size_t s, std::size_t e, const Vocab& vocab) {
  const TokenGrid prep = fim_prepare(smp.tokens, s, e, vocab);
  ArSequence out;
  out.frames = TokenGrid(prep.n_books(), prep.length() + 1, vocab.eos());
  for (std::size_t k = 0; k < prep.n_books(); ++k)
    for (std::size_t c = 0; c < prep.length(); ++c) out.frames.at(k, c) = prep.at(k, c);
  const std::vector<int> order = fim_order(smp.tokens.length(), s, e);
  const auto src = control_ids(smp.controls);
  for (int st = 0; st < kNumStreams; ++st) {
    auto& ids = out.cond[std::size_t(st)];
    ids.assign(out.frames.length(), -1);
    for (std::size_t c = 0; c < order.size(); ++c)
      if (order[c] >= 0) ids[c] = src[std::size_t(st)][std::size_t(order[c])];
  }
  out.caption = smp.caption;
  return out;
}

// ---------------------------------------------------------------------------
// Model plumbing.

/// Per-position condition ids: frame t at position t, null past the frames.
inline std::array<std::vector<int>, kNumStreams> position_cond_ids(
    const std::array<std::vector<int>, kNumStreams>& frame_ids, std::size_t positions, const DropMask& mask) {
  std::array<std::vector<int>, kNumStreams> ids;
  for (int s = 0; s < kNumStreams; ++s) {
    ids[std::size_t(s)].assign(positions, -1);
    if (mask.dropped[std::size_t(s)]) continue;
    const auto& src = frame_ids[std::size_t(s)];
    for (std::size_t p = 0; p < positions && p < src.size(); ++p) ids[std::size_t(s)][p] = src[p];
  }
  return ids;
}

/// Model input tokens for a delayed grid: start column followed by all but the last column.
inline std::vector<int> shifted_input(const TokenGrid& delayed, const Vocab& vocab) {
  const std::size_t nq = delayed.n_books(), n = delayed.length();
  std::vector<int> in(n * nq);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < nq; ++k) in[p * nq + k] = p == 0 ? vocab.start() : delayed.at(k, p - 1);
  return in;
}

/// Standard-mode CE of one sequence; accumulates scaled gradients into `grads` when non-null.
inline double sequence_loss(const Model& m, const ArSequence& seq, const DropMask& mask, float grad_scale,
                            float* grads) {
  ARFM_CHECK(m.paradigm() == Paradigm::kAr, ErrorKind::kInvalidArgument, "ar: model is not autoregressive");
  const Vocab vocab = m.spec().world.vocab();
  const TokenGrid delayed = apply_delay(seq.frames, vocab, true);
  const std::size_t n = delayed.length();
  ARFM_CHECK(n <= std::size_t(m.spec().shape.max_len), ErrorKind::kInvalidArgument,
             "ar: sequence of " + std::to_string(n) + " positions overflows max_len " +
                 std::to_string(m.spec().shape.max_len));
  const float* p = m.params.data();
  nn::SeqInput<float> in;
  in.tokens = shifted_input(delayed, vocab);
  const ConditionGrid grid = m.cond().build_from_ids(p, position_cond_ids(seq.cond, n, mask));
  in.cond = grid.values;
  in.caption = effective_caption(seq.caption, mask.caption);
  nn::ForwardTrace<float> tr;
  const Mat<float> logits = m.net().forward(p, in, grads ? &tr : nullptr);
  Mat<float> d_logits;
  const CeResult ce =
      ce_loss(logits, delayed, vocab.total(), vocab.card, CeMode::kStandard, grads ? &d_logits : nullptr);
  if (grads) {
    d_logits *= grad_scale;
    const Mat<float> d_cond = m.net().backward(p, tr, d_logits, grads);
    m.cond().backward(d_cond, grid, grads);
  }
  return ce.loss;
}

// ---------------------------------------------------------------------------
// Decoding.

/// One generation request. Frames [0, prompt.length()) are forced; up to
/// `gen_frames` more are sampled. With `allow_eos`, book 0 may end the
/// generated span early with EOS (never on its first frame).
struct DecodeRequest {
  std::vector<int> caption;
  std::array<std::vector<int>, kNumStreams> cond;  // per frame, -1 = null
  TokenGrid prompt;
  std::size_t gen_frames = 0;
  bool allow_eos = false;
};

struct DecodeResult {
  TokenGrid frames;  // prompt + generated frames, EOS excluded
  std::size_t generated = 0;
  bool hit_eos = false;
};

struct DecodeStats {
  std::size_t model_evals = 0;  // per-position model calls summed over streams
};

namespace detail {

struct StreamState {
  nn::KvCache<float> cache;
  std::vector<int> caption;
  ConditionGrid grid;
  std::vector<int> inputs;  // grows by n_books per position (uncached path)
};

}  // namespace detail

/// Batched decoding over the delayed grid. With `use_cache` the backbone runs
/// incrementally; otherwise every position re-runs the full prefix.
inline std::vector<DecodeResult> decode(const Model& m, const std::vector<DecodeRequest>& reqs,
                                        const ArSamplerConfig& cfg, SeededRng rng, bool use_cache = true,
                                        DecodeStats* stats = nullptr) {
  cfg.validate();
  ARFM_CHECK(m.paradigm() == Paradigm::kAr, ErrorKind::kInvalidArgument, "ar: model is not autoregressive");
  const Vocab vocab = m.spec().world.vocab();
  const auto nq = std::size_t(m.spec().world.n_codebooks);
  const int V = vocab.total();
  const float* p = m.params.data();
  const bool need_uncond = cfg.cfg_coef != 1.0;
  const bool need_cond = cfg.cfg_coef != 0.0;
  const std::size_t nr = reqs.size();

  struct Job {
    std::size_t prompt_len, total_frames, eos_frame;
    std::size_t n_cols;
    TokenGrid delayed;
    SeededRng rng;
    int cond_stream = -1, uncond_stream = -1;
    bool done = false;
  };
  std::vector<Job> jobs;
  std::vector<detail::StreamState> streams;
  for (std::size_t r = 0; r < nr; ++r) {
    const DecodeRequest& q = reqs[r];
    ARFM_CHECK(q.prompt.length() == 0 || q.prompt.n_books() == nq, ErrorKind::kShape,
               "decode: prompt book count mismatch");
    Job j;
    j.prompt_len = q.prompt.length();
    j.total_frames = j.prompt_len + q.gen_frames;
    ARFM_CHECK(j.total_frames >= 1, ErrorKind::kInvalidArgument, "decode: nothing to generate");
    j.eos_frame = j.total_frames;
    j.n_cols = j.total_frames + nq - 1;
    ARFM_CHECK(j.n_cols <= std::size_t(m.spec().shape.max_len), ErrorKind::kInvalidArgument,
               "decode: " + std::to_string(j.n_cols) + " positions overflow max_len");
    j.delayed = TokenGrid(nq, j.n_cols, vocab.pad());
    j.rng = rng.split(r);
    auto add_stream = [&](bool null) {
      detail::StreamState st;
      st.caption = effective_caption(q.caption, null);
      st.grid = m.cond().build_from_ids(
          p, position_cond_ids(q.cond, j.n_cols, null ? DropMask::everything() : DropMask::none()));
      if (use_cache) st.cache = m.net().make_cache(p, st.caption);
      streams.push_back(std::move(st));
      return int(streams.size() - 1);
    };
    if (need_cond) j.cond_stream = add_stream(false);
    if (need_uncond) j.uncond_stream = add_stream(true);
    jobs.push_back(std::move(j));
  }

  std::size_t max_cols = 0;
  for (const Job& j : jobs) max_cols = std::max(max_cols, j.n_cols);
  std::vector<float> guided(static_cast<std::size_t>(V));
  std::vector<bool> allowed(static_cast<std::size_t>(V));
  std::vector<int> step_tokens;

  for (std::size_t c = 0; c < max_cols; ++c) {
    // Inputs at position c for every live stream.
    std::vector<int> live;
    for (std::size_t r = 0; r < nr; ++r) {
      if (jobs[r].done) continue;
      for (int s : {jobs[r].cond_stream, jobs[r].uncond_stream})
        if (s >= 0) live.push_back(s);
    }
    if (live.empty()) break;
    std::vector<std::size_t> live_job;
    for (std::size_t r = 0; r < nr; ++r)
      if (!jobs[r].done) live_job.push_back(r);
    step_tokens.assign(live.size() * nq, 0);
    std::vector<int> stream_row(streams.size(), -1);
    {
      std::size_t i = 0;
      for (std::size_t r : live_job) {
        for (int s : {jobs[r].cond_stream, jobs[r].uncond_stream}) {
          if (s < 0) continue;
          for (std::size_t k = 0; k < nq; ++k)
            step_tokens[i * nq + k] = c == 0 ? vocab.start() : jobs[r].delayed.at(k, c - 1);
          stream_row[std::size_t(s)] = int(i);
          ++i;
        }
      }
    }
    Mat<float> logits(Eigen::Index(live.size()), Eigen::Index(nq) * V);
    if (use_cache) {
      std::vector<nn::KvCache<float>*> caches;
      std::vector<nn::StepInput> steps;
      for (std::size_t i = 0; i < live.size(); ++i) {
        detail::StreamState& st = streams[std::size_t(live[i])];
        caches.push_back(&st.cache);
        steps.push_back({std::span<const int>(step_tokens.data() + i * nq, nq),
                         std::span<const float>(st.grid.values.row(Eigen::Index(c)).data(),
                                                std::size_t(st.grid.values.cols()))});
      }
      logits = m.net().decode_step<float>(p, caches, steps);
    } else {
      for (std::size_t i = 0; i < live.size(); ++i) {
        detail::StreamState& st = streams[std::size_t(live[i])];
        st.inputs.insert(st.inputs.end(), step_tokens.begin() + std::ptrdiff_t(i * nq),
                         step_tokens.begin() + std::ptrdiff_t((i + 1) * nq));
        nn::SeqInput<float> in;
        in.tokens = st.inputs;
        in.cond = st.grid.values.topRows(Eigen::Index(c + 1));
        in.caption = st.caption;
        logits.row(Eigen::Index(i)) = m.net().forward(p, in).row(Eigen::Index(c));
      }
    }
    if (stats) stats->model_evals += live.size();

    for (std::size_t r : live_job) {
      Job& j = jobs[r];
      if (c >= j.n_cols) {
        j.done = true;
        continue;
      }
      const DecodeRequest& q = reqs[r];
      for (std::size_t k = 0; k < nq; ++k) {
        if (c < k) continue;  // leading PAD
        const std::size_t f = c - k;
        int id;
        if (f > j.eos_frame) {
          id = vocab.pad();
        } else if (f == j.eos_frame) {
          id = j.eos_frame < j.total_frames ? vocab.eos() : vocab.pad();
        } else if (f < j.prompt_len) {
          id = q.prompt.at(k, f);
        } else {
          auto row = [&](int s) {
            return std::span<const float>(logits.row(stream_row[std::size_t(s)]).data() + k * std::size_t(V),
                                          std::size_t(V));
          };
          if (j.cond_stream >= 0 && j.uncond_stream >= 0) guide(row(j.cond_stream), row(j.uncond_stream), cfg.cfg_coef, guided);
          else {
            const auto src = row(j.cond_stream >= 0 ? j.cond_stream : j.uncond_stream);
            std::copy(src.begin(), src.end(), guided.begin());
          }
          for (int v = 0; v < V; ++v) allowed[std::size_t(v)] = vocab.is_regular(v);
          if (q.allow_eos && k == 0 && f > j.prompt_len) allowed[std::size_t(vocab.eos())] = true;
          id = cfg.greedy() ? argmax_allowed(guided, allowed)
                            : draw(sampling_distribution(guided, allowed, cfg), j.rng);
          if (id == vocab.eos()) {
            j.eos_frame = f;
            id = vocab.eos();
          }
        }
        j.delayed.at(k, c) = id;
      }
      // Stop once every book has passed the final frame.
      const std::size_t last = j.eos_frame < j.total_frames ? j.eos_frame : j.total_frames - 1;
      if (c >= last + nq - 1) j.done = true;
    }
  }

  std::vector<DecodeResult> out;
  for (std::size_t r = 0; r < nr; ++r) {
    const Job& j = jobs[r];
    const std::size_t nf = std::min(j.eos_frame, j.total_frames);
    DecodeResult res;
    res.frames = TokenGrid(nq, nf);
    for (std::size_t k = 0; k < nq; ++k)
      for (std::size_t f = 0; f < nf; ++f) res.frames.at(k, f) = j.delayed.at(k, f + k);
    res.generated = nf - j.prompt_len;
    res.hit_eos = j.eos_frame < j.total_frames;
    if (!res.hit_eos) {
      // Without EOS the generated grid is a well-formed delayed grid.
      const TokenGrid reverted = revert_delay(j.delayed, vocab);
      ARFM_CHECK(reverted == res.frames, ErrorKind::kFormat, "decode: delayed grid inconsistent with frames");
    }
    out.push_back(std::move(res));
  }
  return out;
}

/// Plain generation of `frames` frames per request from its controls and caption.
inline std::vector<TokenGrid> sample(const Model& m, const std::vector<const WorldSample*>& conds,
                                     std::size_t frames, const ArSamplerConfig& cfg, SeededRng rng,
                                     DecodeStats* stats = nullptr) {
  std::vector<DecodeRequest> reqs;
  for (const WorldSample* s : conds) {
    DecodeRequest q;
    q.caption = s->caption;
    q.cond = control_ids(s->controls);
    q.gen_frames = frames;
    reqs.push_back(std::move(q));
  }
  std::vector<TokenGrid> out;
  for (DecodeResult& r : decode(m, reqs, cfg, rng, true, stats)) out.push_back(std::move(r.frames));
  return out;
}

/// Fill-in-the-middle inpainting of frames [s, e) of `smp`. Frames outside the
/// span are copied from the source; a span ended early by EOS is padded by
/// repeating its last generated frame.
inline TokenGrid fim_inpaint(const Model& m, const WorldSample& smp, std::size_t s, std::size_t e,
                             const ArSamplerConfig& cfg, SeededRng rng) {
  const Vocab vocab = m.spec().world.vocab();
  const std::size_t len = smp.tokens.length();
  const ArSequence full = fim_sequence(smp, s, e, vocab);
  const std::size_t prompt_len = len - (e - s) + 3;
  DecodeRequest q;
  q.caption = smp.caption;
  q.cond = full.cond;
  q.prompt = full.frames.columns(0, prompt_len);
  q.gen_frames = e - s;
  if (cfg.max_frames > 0) q.gen_frames = std::min(q.gen_frames, cfg.max_frames);
  q.allow_eos = true;
  const DecodeResult r = decode(m, {q}, cfg, rng).front();
  ARFM_CHECK(r.generated >= 1, ErrorKind::kFormat, "fim_inpaint: model produced an empty middle segment");
  TokenGrid out = smp.tokens;
  for (std::size_t f = 0; f < e - s; ++f) {
    const std::size_t src = prompt_len + std::min(f, r.generated - 1);
    for (std::size_t k = 0; k < out.n_books(); ++k) {
      const int id = r.frames.at(k, src);
      if (!vocab.is_regular(id))
        throw Error(ErrorKind::kFormat, "fim_inpaint: generated frame " + std::to_string(f) + " book " +
                                            std::to_string(k) + " holds reserved id " + std::to_string(id));
      out.at(k, s + f) = id;
    }
  }
  return out;
}

}  // namespace arfm::ar
