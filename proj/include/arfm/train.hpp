#pragma once

#include <functional>
#include <string>
#include <vector>

#include "arfm/ar.hpp"
#include "arfm/fm.hpp"
#include "arfm/nn/adamw.hpp"

namespace arfm {

enum class Finetune { kNone, kFim, kInpaint };

inline Finetune parse_finetune(const std::string& s) {
  if (s == "none") return Finetune::kNone;
  if (s == "fim") return Finetune::kFim;
  if (s == "inpaint") return Finetune::kInpaint;
  throw Error(ErrorKind::kConfig, "unknown finetune mode '" + s + "' (expected none, fim or inpaint)");
}
inline const char* to_string(Finetune f) {
  return f == Finetune::kNone ? "none" : f == Finetune::kFim ? "fim" : "inpaint";
}

struct TrainConfig {
  int batch_size = 32;
  double segment_seconds = 10.0;
  long steps = 2000;
  long warmup = 4000;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double p_drop = 0.5;
  double p_all = 0.1;
  double sigma_min = 1e-4;
  Finetune finetune = Finetune::kNone;
  fm::MaskPolicy mask_policy = fm::MaskPolicy::kPaper;

  void validate() const {
    ARFM_CHECK(batch_size >= 1 && steps >= 1 && warmup >= 0 && lr > 0.0 && segment_seconds > 0.0, ErrorKind::kConfig,
               "train: batch_size, steps and lr must be positive");
    ARFM_CHECK(p_drop >= 0.0 && p_drop <= 1.0 && p_all >= 0.0 && p_all <= 1.0, ErrorKind::kConfig,
               "train: dropout probabilities must lie in [0, 1]");
  }
};

/// Window [j0, j0 + len) of a sample; the caption is rebuilt for the window.
inline WorldSample crop(const WorldSample& s, const WorldSpec& w, std::size_t j0, std::size_t len) {
  const std::size_t total = s.tokens.length();
  if (j0 == 0 && len == total) return s;
  ARFM_CHECK(j0 + len <= total, ErrorKind::kInvalidArgument, "crop: window outside the sample");
  auto cut = [&](const std::vector<int>& v) {
    return std::vector<int>(v.begin() + std::ptrdiff_t(j0), v.begin() + std::ptrdiff_t(j0 + len));
  };
  WorldSample o;
  o.tokens = s.tokens.columns(j0, j0 + len);
  const std::size_t d = s.latent.dim(1);
  o.latent = Tensor({len, d}, std::vector<float>(s.latent.data().begin() + std::ptrdiff_t(j0 * d),
                                                 s.latent.data().begin() + std::ptrdiff_t((j0 + len) * d)));
  o.controls = s.controls;
  o.controls.chords = cut(s.controls.chords);
  o.controls.melody = cut(s.controls.melody);
  o.controls.drums = cut(s.controls.drums);
  o.controls.beats = cut(s.controls.beats);
  o.caption = make_caption(w, o.controls.chords);
  o.duration = double(len) / w.frame_rate;
  return o;
}

struct StepLog {
  long step = 0;
  double loss = 0.0, lr = 0.0, grad_norm = 0.0;
};

/// Runs `cfg.steps` optimizer steps on batches drawn from `data`.
/// Everything random derives from `seed`, so equal inputs give equal parameters.
inline std::vector<StepLog> train(Model& m, const std::vector<WorldSample>& data, const TrainConfig& cfg,
                                  std::uint64_t seed, const std::function<void(const StepLog&)>& on_step = {}) {
  cfg.validate();
  ARFM_CHECK(!data.empty(), ErrorKind::kInvalidArgument, "train: empty dataset");
  ARFM_CHECK(m.params.size() == m.layout().total(), ErrorKind::kInvalidArgument, "train: model parameters not set");
  const WorldSpec& w = m.spec().world;
  const Vocab vocab = w.vocab();
  const bool is_ar = m.paradigm() == Paradigm::kAr;
  ARFM_CHECK(cfg.finetune != Finetune::kFim || is_ar, ErrorKind::kConfig, "train: fim fine-tuning needs an ar model");
  ARFM_CHECK(cfg.finetune != Finetune::kInpaint || !is_ar, ErrorKind::kConfig,
             "train: inpaint fine-tuning needs an fm model");
  const std::size_t seg = w.frames(cfg.segment_seconds);
  for (const WorldSample& s : data)
    ARFM_CHECK(s.tokens.length() >= seg, ErrorKind::kInvalidArgument,
               "train: dataset samples are shorter than segment_seconds");
  const fm::OtPath path{cfg.sigma_min};
  path.validate();
  nn::AdamW opt(m.layout(), {0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});
  const nn::LrSchedule sched{cfg.lr, cfg.warmup, cfg.steps};
  nn::ParamVec grads(m.layout().total());
  std::vector<StepLog> log;
  const SeededRng root(seed, 0x7EA1);
  const float scale = 1.0f / float(cfg.batch_size);

  for (long step = 0; step < cfg.steps; ++step) {
    std::fill(grads.begin(), grads.end(), 0.0f);
    SeededRng srng = root.split(std::uint64_t(step));
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      SeededRng r = srng.split(std::uint64_t(b));
      const WorldSample& src = data[r.below(std::uint32_t(data.size()))];
      const std::size_t j0 = src.tokens.length() > seg ? r.below(std::uint32_t(src.tokens.length() - seg + 1)) : 0;
      const WorldSample smp = crop(src, w, j0, seg);
      const DropMask mask = drop_conditions(r, cfg.p_drop, cfg.p_all);
      if (is_ar) {
        ar::ArSequence seq;
        if (cfg.finetune == Finetune::kFim) {
          const fm::Span sp = fm::draw_mask(cfg.mask_policy, seg, w.frame_rate, r);
          seq = ar::fim_sequence(smp, std::max<std::size_t>(1, sp.s), std::min(sp.e, seg - 1), vocab);
        } else {
          seq = ar::plain_sequence(smp);
        }
        loss += ar::sequence_loss(m, seq, mask, scale, grads.data());
      } else {
        const fm::State z = fm::to_state(normalize(smp.latent, m.spec().norm));
        const double tau = r.uniform_double();
        fm::State y0(z.rows(), z.cols());
        for (Eigen::Index i = 0; i < y0.size(); ++i) y0.data()[i] = r.normal();
        fm::LossSpan span;
        if (cfg.finetune == Finetune::kInpaint) {
          const fm::Span sp = fm::draw_mask(cfg.mask_policy, seg, w.frame_rate, r);
          span = {true, sp.s, sp.e};
        }
        loss += fm::sequence_loss(m, path, z, smp, mask, tau, y0, span, scale, grads.data());
      }
    }
    StepLog entry;
    entry.step = step + 1;
    entry.loss = loss / cfg.batch_size;
    entry.lr = sched.at(step + 1);
    entry.grad_norm = opt.step(m.params, grads, entry.lr);
    ARFM_CHECK(std::isfinite(entry.loss), ErrorKind::kNumeric, "train: loss diverged at step " + std::to_string(step + 1));
    log.push_back(entry);
    if (on_step) on_step(entry);
  }
  return log;
}

}  // namespace arfm
