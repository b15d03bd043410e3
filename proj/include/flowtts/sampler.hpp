#pragma once

// Euler integration from noise to data with chained classifier-free guidance.
// Each condition's contribution is a scaled difference between successive
// conditional branches; four velocity evaluations per step.

#include <cmath>
#include <vector>

#include "flowtts/style_encoder.hpp"
#include "flowtts/training.hpp"
#include "flowtts/tts_model.hpp"

namespace flowtts {

struct GuidanceScales {
  float text = 2.0f;
  float spk = 2.0f;
  float style = 2.0f;
};

struct SamplerConfig {
  int steps = 32;
  uint64_t seed = 7;
};

// v_hat = v(0) + s_text [v(text) - v(0)] + s_spk [v(text,spk) - v(text)]
//       + s_style [v(all) - v(text,spk)]
// The empty branch substitutes learned nulls for all three slots. The
// combination is accumulated in double so the scale-(1,1,1) telescoping
// identity holds to rounding.
template <class S>
Tensor<S> chained_cfg_velocity(const TTSModel<S>& model, const Tensor<S>& z_t,
                               S t, const ConditionSet<S>& cond,
                               const GuidanceScales& scales) {
  if (scales.text < 0 || scales.spk < 0 || scales.style < 0)
    fail("chained_cfg_velocity: guidance scales must be non-negative");
  if (!cond.has_text() || !cond.has_spk() || !cond.has_style())
    fail("chained_cfg_velocity: all three conditions must be provided");

  ConditionSet<S> none;
  ConditionSet<S> text_only;
  text_only.text = cond.text;
  ConditionSet<S> text_spk;
  text_spk.text = cond.text;
  text_spk.spk = cond.spk;

  auto v0 = model.dit_forward(z_t, t, none).velocity;
  auto v1 = model.dit_forward(z_t, t, text_only).velocity;
  auto v2 = model.dit_forward(z_t, t, text_spk).velocity;
  auto v3 = model.dit_forward(z_t, t, cond).velocity;

  auto out = Tensor<S>::zeros(v0.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double b0 = double(v0.data()[i]), b1 = double(v1.data()[i]);
    double b2 = double(v2.data()[i]), b3 = double(v3.data()[i]);
    out.data()[i] = S(b0 + double(scales.text) * (b1 - b0) +
                      double(scales.spk) * (b2 - b1) +
                      double(scales.style) * (b3 - b2));
  }
  return out;
}

// z <- z + h * v(z, t) for uniform h = 1/steps, from z ~ N(0,I) at t=0 to
// t=1. velocity_fn(z, t) supplies the field.
template <class S, class VelocityFn>
Tensor<S> euler_integrate(VelocityFn&& velocity_fn, int64_t frames,
                          int64_t channels, const SamplerConfig& cfg) {
  if (cfg.steps < 1) fail("euler_integrate: steps must be >= 1");
  Rng rng(cfg.seed);
  auto z = Tensor<S>::zeros({frames, channels});
  for (int64_t i = 0; i < z.numel(); ++i) z.data()[i] = S(rng.normal());

  const S h = S(1) / S(cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    S t = S(k) / S(cfg.steps);
    Tensor<S> v = velocity_fn(z, t);
    detail::check_same_shape("euler_integrate", z, v);
    for (int64_t i = 0; i < z.numel(); ++i) {
      z.data()[i] += h * v.data()[i];
      if (!std::isfinite(z.data()[i]))
        fail("euler_integrate: non-finite state at step " + std::to_string(k));
    }
  }
  return z;
}

// Exactly one style modality per synthesis call.
struct StylePrompt {
  enum class Kind { Audio, Text } kind = Kind::Audio;
  Tensor<float> frames;     // audio prompt: reference latent frames
  std::vector<int> tokens;  // text prompt: style descriptor tokens

  static StylePrompt audio(Tensor<float> f) {
    StylePrompt p;
    p.kind = Kind::Audio;
    p.frames = std::move(f);
    return p;
  }
  static StylePrompt text(std::vector<int> toks) {
    StylePrompt p;
    p.kind = Kind::Text;
    p.tokens = std::move(toks);
    return p;
  }
};

// Full inference assembly: style embedding via the matching branch of the
// frozen style encoder, durations from the duration predictor, guided Euler
// sampling, then de-standardization back to world latent scale.
inline Tensor<float> infer(const TTSModel<float>& model,
                           const StyleEncoder<float>& style_enc,
                           const LatentStats& stats,
                           const std::vector<int>& content,
                           const Tensor<float>& speaker_ref_frames,
                           const StylePrompt& style,
                           const GuidanceScales& scales,
                           const SamplerConfig& cfg) {
  if (content.empty()) fail("infer: empty content");
  NoGrad<float> inference;

  auto c_style = style.kind == StylePrompt::Kind::Audio
                     ? style_enc.encode_audio(style.frames)
                     : style_enc.encode_style_text(style.tokens);
  auto c_spk = model.encode_speaker(speaker_ref_frames);
  auto token_feats = model.encode_content(content);

  auto log_dur = model.predict_durations(token_feats, c_style);
  std::vector<int> durations(content.size());
  for (size_t i = 0; i < content.size(); ++i) {
    long d = std::lround(std::exp(double(log_dur.data()[i])));
    durations[i] = int(std::max(d, 1L));
  }

  ConditionSet<float> cond;
  cond.text = length_regulate(token_feats, durations);
  cond.spk = c_spk;
  cond.style = c_style;

  auto z = euler_integrate<float>(
      [&](const Tensor<float>& z_t, float t) {
        return chained_cfg_velocity(model, z_t, t, cond, scales);
      },
      cond.text.rows(), model.channels, cfg);
  return destandardize_frames(z, stats);
}

}  // namespace flowtts
