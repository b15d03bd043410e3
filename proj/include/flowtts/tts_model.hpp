#pragma once

// The conditional velocity network: content text encoder, reference-based
// speaker encoder, duration predictor, and a DiT backbone whose conditioning
// comes from adaptive layer-norm modulation (timestep + speaker + style) and
// channel-concatenated frame-aligned content features.
//
// Absent conditions are represented by learned null embeddings, never by
// zeros of a real embedding.

#include <atomic>
#include <string>
#include <vector>

#include "flowtts/nn.hpp"
#include "flowtts/world.hpp"

namespace flowtts {

struct TTSModelConfig {
  uint64_t seed = 21;
  int width = 64;
  int dit_blocks = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int text_blocks = 2;
  int spk_blocks = 2;
  int spk_dim = 32;
  int style_dim = 32;
  int student_block = 2;  // 1-indexed block whose output feeds alignment
};

inline Json tts_model_config_json(const TTSModelConfig& c) {
  return Json{{"seed", c.seed},
              {"width", c.width},
              {"dit_blocks", c.dit_blocks},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"text_blocks", c.text_blocks},
              {"spk_blocks", c.spk_blocks},
              {"spk_dim", c.spk_dim},
              {"style_dim", c.style_dim},
              {"student_block", c.student_block}};
}

inline TTSModelConfig tts_model_config_from_json(const Json& j) {
  TTSModelConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.width = j.at("width").get<int>();
  c.dit_blocks = j.at("dit_blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.text_blocks = j.at("text_blocks").get<int>();
  c.spk_blocks = j.at("spk_blocks").get<int>();
  c.spk_dim = j.at("spk_dim").get<int>();
  c.style_dim = j.at("style_dim").get<int>();
  c.student_block = j.at("student_block").get<int>();
  return c;
}

// Count of velocity-network forward passes; the guided sampler's
// branch-count contract is asserted against this.
inline std::atomic<uint64_t>& dit_eval_count() {
  static std::atomic<uint64_t> c{0};
  return c;
}

// The (c_text, c_spk, c_style) triple; an undefined tensor means the slot is
// absent and the model substitutes its learned null pathway.
template <class S>
struct ConditionSet {
  Tensor<S> text;   // [T, width] frame-aligned content features
  Tensor<S> spk;    // [1, spk_dim]
  Tensor<S> style;  // [1, style_dim]

  bool has_text() const { return text.defined(); }
  bool has_spk() const { return spk.defined(); }
  bool has_style() const { return style.defined(); }
};

template <class S>
struct DitOutput {
  Tensor<S> velocity;  // [T, channels]
  Tensor<S> student;   // [T, width], output of the student block
};

template <class S>
struct TTSModel {
  TTSModelConfig cfg;
  int channels = 0;
  int vocab = 0;
  int teacher_dim = 0;
  ParamStore<S> ps;

  // content text encoder
  Tensor<S> tok_table;
  std::vector<TransformerBlock<S>> text_blocks;
  LayerNorm<S> text_ln;

  // speaker encoder over reference frames
  Linear<S> spk_in;
  std::vector<TransformerBlock<S>> spk_blocks;
  LayerNorm<S> spk_ln;
  Linear<S> spk_out;

  // duration predictor (conv1d x2 + MLP on detached inputs)
  Linear<S> dur_conv1, dur_conv2, dur_fc1, dur_fc2;

  // DiT backbone
  Linear<S> in_proj;
  Linear<S> t_fc1, t_fc2;
  Linear<S> spk_cond, style_cond;
  std::vector<AdaLnBlock<S>> blocks;
  Linear<S> final_mod;  // cond -> (shift, scale) for the final norm
  Linear<S> out_proj;
  Linear<S> repa_proj;  // width -> teacher_dim, applied after upsampling

  // learned null embeddings, distinct parameters from any real pathway
  Tensor<S> null_spk, null_style, null_content;

  TTSModel(const TTSModelConfig& c, int world_channels, int world_vocab,
           int teacher_dim_in)
      : cfg(c), channels(world_channels), vocab(world_vocab),
        teacher_dim(teacher_dim_in), ps(c.seed) {
    const int64_t w = cfg.width;
    tok_table = ps.randn("text.table", {vocab, w}, S(0.02));
    for (int b = 0; b < cfg.text_blocks; ++b)
      text_blocks.emplace_back(ps, "text.block" + std::to_string(b), w,
                               cfg.heads, cfg.mlp_ratio);
    text_ln = LayerNorm<S>(ps, "text.ln", w);

    spk_in = Linear<S>(ps, "spk.in", 2 * channels, w);
    for (int b = 0; b < cfg.spk_blocks; ++b)
      spk_blocks.emplace_back(ps, "spk.block" + std::to_string(b), w,
                              cfg.heads, cfg.mlp_ratio);
    spk_ln = LayerNorm<S>(ps, "spk.ln", w);
    spk_out = Linear<S>(ps, "spk.out", w, cfg.spk_dim);

    dur_conv1 = Linear<S>(ps, "dur.conv1", 3 * (w + cfg.style_dim), w);
    dur_conv2 = Linear<S>(ps, "dur.conv2", 3 * w, w);
    dur_fc1 = Linear<S>(ps, "dur.fc1", w, w);
    dur_fc2 = Linear<S>(ps, "dur.fc2", w, 1);

    in_proj = Linear<S>(ps, "dit.in", channels + w, w);
    t_fc1 = Linear<S>(ps, "dit.t.fc1", w, w);
    t_fc2 = Linear<S>(ps, "dit.t.fc2", w, w);
    spk_cond = Linear<S>(ps, "dit.cond.spk", cfg.spk_dim, w);
    style_cond = Linear<S>(ps, "dit.cond.style", cfg.style_dim, w);
    for (int b = 0; b < cfg.dit_blocks; ++b)
      blocks.emplace_back(ps, "dit.block" + std::to_string(b), w, cfg.heads,
                          w, cfg.mlp_ratio);
    final_mod = Linear<S>(ps, "dit.final.mod", w, 2 * w, /*zero_init=*/true);
    out_proj = Linear<S>(ps, "dit.out", w, channels, /*zero_init=*/true);
    repa_proj = Linear<S>(ps, "dit.repa", w, teacher_dim);

    null_spk = ps.randn("null.spk", {int64_t(cfg.spk_dim)}, S(0.02));
    null_style = ps.randn("null.style", {int64_t(cfg.style_dim)}, S(0.02));
    null_content = ps.randn("null.content", {w}, S(0.02));
  }

  // per-token content features, [L, width]
  Tensor<S> encode_content(const std::vector<int>& tokens) const {
    if (tokens.empty()) fail("encode_content: empty token sequence");
    for (int t : tokens)
      if (t < 0 || t >= vocab)
        fail("encode_content: token " + std::to_string(t) +
             " out of vocabulary");
    auto h = add(gather_rows(tok_table, tokens),
                 sinusoidal_positions<S>(int64_t(tokens.size()), cfg.width));
    for (const auto& blk : text_blocks) h = blk(h);
    return text_ln(h);
  }

  // speaker embedding from reference frames, [1, spk_dim]
  Tensor<S> encode_speaker(const Tensor<float>& ref_frames) const {
    if (ref_frames.rows() < 1) fail("encode_speaker: empty reference");
    auto x = frame_features<S>(ref_frames);
    auto h = add(spk_in(x), sinusoidal_positions<S>(x.rows(), cfg.width));
    for (const auto& blk : spk_blocks) h = blk(h);
    h = spk_ln(h);
    auto pooled = reshape(mean_axis0(h), {1, int64_t(cfg.width)});
    return spk_out(pooled);
  }

  // per-token log-durations, [L, 1]. Callers pass detached inputs: duration
  // supervision must not shape the text or style encoders.
  Tensor<S> predict_durations(const Tensor<S>& token_features,
                              const Tensor<S>& style_embedding) const {
    if (token_features.rows() < 1) fail("predict_durations: no tokens");
    if (style_embedding.numel() != cfg.style_dim)
      fail("predict_durations: style embedding size " +
           shape_str(style_embedding.shape()) + " != " +
           std::to_string(cfg.style_dim));
    auto style_rows = tile_rowvec(reshape(style_embedding, {int64_t(cfg.style_dim)}),
                                  token_features.rows());
    auto x = concat_cols(std::vector<Tensor<S>>{token_features, style_rows});
    auto h = gelu(dur_conv1(unfold1d(x, 3)));
    h = gelu(dur_conv2(unfold1d(h, 3)));
    return dur_fc2(gelu(dur_fc1(h)));
  }

  DitOutput<S> dit_forward(const Tensor<S>& z_t, S t,
                           const ConditionSet<S>& cond) const {
    if (t < S(0) || t > S(1))
      fail("dit_forward: t=" + std::to_string(double(t)) + " outside [0,1]");
    int64_t frames = z_t.rows();
    if (z_t.cols() != channels)
      fail("dit_forward: latent width " + shape_str(z_t.shape()) +
           " != channels " + std::to_string(channels));
    Tensor<S> content = cond.has_text() ? cond.text
                                        : tile_rowvec(null_content, frames);
    if (content.rows() != frames)
      fail("dit_forward: content length " + std::to_string(content.rows()) +
           " != latent length " + std::to_string(frames));

    auto x = add(in_proj(concat_cols(std::vector<Tensor<S>>{z_t, content})),
                 sinusoidal_positions<S>(frames, cfg.width));

    auto t_emb = t_fc2(gelu(t_fc1(timestep_embedding<S>(t, cfg.width))));
    auto spk_e = cond.has_spk() ? cond.spk
                                : reshape(null_spk, {1, int64_t(cfg.spk_dim)});
    auto style_e = cond.has_style()
                       ? cond.style
                       : reshape(null_style, {1, int64_t(cfg.style_dim)});
    auto c = add(add(t_emb, spk_cond(spk_e)), style_cond(style_e));

    DitOutput<S> out;
    for (size_t b = 0; b < blocks.size(); ++b) {
      x = blocks[b](x, c);
      if (int(b) + 1 == cfg.student_block) out.student = x;
    }
    auto m = final_mod(c);
    auto shift = reshape(slice_cols(m, 0, cfg.width), {int64_t(cfg.width)});
    auto sc = reshape(slice_cols(m, cfg.width, 2 * cfg.width),
                      {int64_t(cfg.width)});
    auto y = add_rowvec(mul_rowvec(layer_norm_plain(x), add_scalar(sc, S(1))),
                        shift);
    out.velocity = out_proj(y);
    dit_eval_count()++;
    return out;
  }
};

// token i's feature row repeated durations[i] times; durations below 1 are
// clamped to 1 (and counted)
template <class S>
Tensor<S> length_regulate(const Tensor<S>& token_features,
                          const std::vector<int>& durations) {
  if (int64_t(durations.size()) != token_features.rows())
    fail("length_regulate: " + std::to_string(durations.size()) +
         " durations for " + std::to_string(token_features.rows()) +
         " tokens");
  std::vector<int> ids;
  for (size_t i = 0; i < durations.size(); ++i) {
    int d = durations[i];
    if (d < 1) {
      d = 1;
      EventCounters::clamped_duration()++;
    }
    for (int k = 0; k < d; ++k) ids.push_back(int(i));
  }
  return gather_rows(token_features, ids);
}

}  // namespace flowtts
