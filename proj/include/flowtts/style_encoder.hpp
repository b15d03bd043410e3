#pragma once

// Dual-encoder style space: an audio branch over latent frames and a text
// branch over style descriptor tokens, aligned by an audio-anchored InfoNCE
// loss plus multi-task attribute supervision on the pre-projection audio
// features. Embeddings are unit-norm by construction.

#include <string>
#include <vector>

#include "flowtts/nn.hpp"
#include "flowtts/world.hpp"

namespace flowtts {

struct StyleEncoderConfig {
  uint64_t seed = 11;
  int width = 64;
  int audio_blocks = 2;
  int text_blocks = 1;
  int heads = 4;
  int mlp_ratio = 4;
  int embed_dim = 32;
  int steps = 1500;
  int batch = 32;
  float lr = 1e-3f;
  float lambda_ce = 1.0f;   // weight of the emotion cross-entropy
  float lambda_mse = 1.0f;  // weight of the energy/rate regression
  float tau_init = 0.07f;
  float tau_min = 0.01f;
  float tau_max = 1.0f;
  float perturb_prob = 0.5f;       // timbre re-rendering on audio inputs
  float descriptor_dropout = 0.2f; // energy/rate word dropout, training only
  int dataset_size = 2000;
};

inline Json style_config_json(const StyleEncoderConfig& c) {
  return Json{{"seed", c.seed},
              {"width", c.width},
              {"audio_blocks", c.audio_blocks},
              {"text_blocks", c.text_blocks},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"embed_dim", c.embed_dim},
              {"steps", c.steps},
              {"batch", c.batch},
              {"lr", c.lr},
              {"lambda_ce", c.lambda_ce},
              {"lambda_mse", c.lambda_mse},
              {"tau_init", c.tau_init},
              {"tau_min", c.tau_min},
              {"tau_max", c.tau_max},
              {"perturb_prob", c.perturb_prob},
              {"descriptor_dropout", c.descriptor_dropout},
              {"dataset_size", c.dataset_size}};
}

template <class S>
struct StyleEncoder {
  StyleEncoderConfig cfg;
  int channels = 0;
  ParamStore<S> ps;

  Linear<S> audio_in;
  std::vector<TransformerBlock<S>> audio_blocks;
  LayerNorm<S> audio_ln;
  Linear<S> audio_proj;
  Linear<S> emo_fc1, emo_fc2;      // MLP head, 5 emotion logits
  Linear<S> reg_fc1, reg_fc2;      // MLP head, (energy, rate) regression
  Tensor<S> text_table;
  std::vector<TransformerBlock<S>> text_blocks;
  LayerNorm<S> text_ln;
  Linear<S> text_proj;
  Tensor<S> tau;

  // regression target standardization, fitted on the training set
  float energy_mean = 1.0f, energy_std = 1.0f;
  float rate_mean = 1.0f, rate_std = 1.0f;

  StyleEncoder(const StyleEncoderConfig& c, int world_channels)
      : cfg(c), channels(world_channels), ps(c.seed) {
    const int64_t w = cfg.width;
    audio_in = Linear<S>(ps, "audio.in", 2 * channels, w);
    for (int b = 0; b < cfg.audio_blocks; ++b)
      audio_blocks.emplace_back(ps, "audio.block" + std::to_string(b), w,
                                cfg.heads, cfg.mlp_ratio);
    audio_ln = LayerNorm<S>(ps, "audio.ln", w);
    audio_proj = Linear<S>(ps, "audio.proj", w, cfg.embed_dim);
    emo_fc1 = Linear<S>(ps, "head.emo.fc1", w, w);
    emo_fc2 = Linear<S>(ps, "head.emo.fc2", w, kNumEmotions);
    reg_fc1 = Linear<S>(ps, "head.reg.fc1", w, w);
    reg_fc2 = Linear<S>(ps, "head.reg.fc2", w, 2);
    text_table = ps.randn("text.table", {kStyleVocab, w}, S(0.02));
    for (int b = 0; b < cfg.text_blocks; ++b)
      text_blocks.emplace_back(ps, "text.block" + std::to_string(b), w,
                               cfg.heads, cfg.mlp_ratio);
    text_ln = LayerNorm<S>(ps, "text.ln", w);
    text_proj = Linear<S>(ps, "text.proj", w, cfg.embed_dim);
    tau = ps.constant("tau", {1}, S(cfg.tau_init));
  }

  void clamp_tau() {
    S v = tau.data()[0];
    tau.data()[0] = std::min(std::max(v, S(cfg.tau_min)), S(cfg.tau_max));
  }

  // pooled pre-projection feature, [1, width]
  Tensor<S> audio_pre(const Tensor<float>& frames) const {
    if (frames.rows() < 1) fail("encode_audio: empty frames");
    auto x = frame_features<S>(frames);
    auto h = add(audio_in(x), sinusoidal_positions<S>(x.rows(), cfg.width));
    for (const auto& blk : audio_blocks) h = blk(h);
    h = audio_ln(h);
    return reshape(mean_axis0(h), {1, int64_t(cfg.width)});
  }

  Tensor<S> project_audio(const Tensor<S>& h_pre) const {
    return l2_normalize_rows(audio_proj(h_pre));
  }

  // unit-norm style embedding from frames, [1, embed_dim]
  Tensor<S> encode_audio(const Tensor<float>& frames) const {
    return project_audio(audio_pre(frames));
  }

  // unit-norm style embedding from descriptor tokens, [1, embed_dim]
  Tensor<S> encode_style_text(const std::vector<int>& tokens) const {
    if (tokens.empty()) fail("encode_style_text: empty descriptor");
    for (int t : tokens)
      if (t < 0 || t >= kStyleVocab)
        fail("encode_style_text: unknown token " + std::to_string(t));
    auto h = add(gather_rows(text_table, tokens),
                 sinusoidal_positions<S>(int64_t(tokens.size()), cfg.width));
    for (const auto& blk : text_blocks) h = blk(h);
    h = text_ln(h);
    auto pooled = reshape(mean_axis0(h), {1, int64_t(cfg.width)});
    return l2_normalize_rows(text_proj(pooled));
  }

  Tensor<S> emotion_logits(const Tensor<S>& h_pre) const {
    return emo_fc2(gelu(emo_fc1(h_pre)));
  }
  Tensor<S> regression_outputs(const Tensor<S>& h_pre) const {
    return reg_fc2(gelu(reg_fc1(h_pre)));
  }

  float standardized_energy(int level) const {
    return (float(level) - energy_mean) / energy_std;
  }
  float standardized_rate(int level) const {
    return (float(level) - rate_mean) / rate_std;
  }
};

// Audio-anchored InfoNCE over paired unit-norm embeddings: row i of h_audio
// against all rows of h_text, the matching index being the positive.
template <class S>
Tensor<S> infonce_loss(const Tensor<S>& h_audio, const Tensor<S>& h_text,
                       const Tensor<S>& tau) {
  if (h_audio.rows() < 2) fail("infonce_loss: need at least 2 pairs");
  detail::check_same_shape("infonce_loss", h_audio, h_text);
  auto logits = mul_scalar_t(matmul_nt(h_audio, h_text), reciprocal(tau));
  std::vector<int> targets(size_t(h_audio.rows()));
  for (size_t i = 0; i < targets.size(); ++i) targets[i] = int(i);
  return softmax_cross_entropy(logits, targets);
}

// L_con + lambda_c * L_ce + lambda_m * L_mse
template <class S>
Tensor<S> style_total_loss(const Tensor<S>& l_con, const Tensor<S>& l_ce,
                           const Tensor<S>& l_mse, float lambda_c,
                           float lambda_m) {
  if (lambda_c < 0 || lambda_m < 0)
    fail("style_total_loss: weights must be non-negative");
  return add(l_con, add(scale(l_ce, S(lambda_c)), scale(l_mse, S(lambda_m))));
}

struct StylePair {
  Tensor<float> frames;
  std::vector<int> tokens;
};

// Fraction of audio embeddings whose nearest text embedding is their pair.
template <class S>
double retrieval_accuracy(const StyleEncoder<S>& enc,
                          const std::vector<StylePair>& pairs) {
  if (pairs.empty()) fail("retrieval_accuracy: no candidates");
  std::vector<Tensor<S>> ha, ht;
  for (const auto& p : pairs) {
    ha.push_back(enc.encode_audio(p.frames));
    ht.push_back(enc.encode_style_text(p.tokens));
  }
  int64_t hits = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    double best = -2.0;
    size_t best_j = 0;
    for (size_t j = 0; j < pairs.size(); ++j) {
      double sim = 0;
      for (int64_t k = 0; k < ha[i].numel(); ++k)
        sim += double(ha[i].data()[k]) * double(ht[j].data()[k]);
      if (sim > best) {
        best = sim;
        best_j = j;
      }
    }
    hits += best_j == i;
  }
  return double(hits) / double(pairs.size());
}

// One evaluation candidate per factor combination.
inline std::vector<StylePair> factor_grid_pairs(const World& w, Rng& rng) {
  std::vector<StylePair> pairs;
  for (int idx = 0; idx < kNumFactorCombos; ++idx) {
    StyleFactors f = factors_from_combo(idx);
    int L = int(rng.uniform_range(4, 12));
    std::vector<int> content(static_cast<size_t>(L));
    for (auto& c : content) c = int(rng.uniform_int(w.cfg.vocab));
    auto u = make_utterance(w, std::move(content), f,
                            int(rng.uniform_int(w.cfg.speakers)), rng.next_u64());
    pairs.push_back({u.frames, style_tokens(f)});
  }
  return pairs;
}

struct StyleTrainMetrics {
  double retrieval_top1 = 0;
  float final_loss = 0;
  std::vector<float> loss_curve;  // sampled every 50 steps
};

inline StyleTrainMetrics train_style_encoder(const World& world,
                                             StyleEncoder<float>& enc,
                                             Rng& rng) {
  const auto& cfg = enc.cfg;
  if (cfg.dataset_size < 2000)
    fail("train_style_encoder: dataset must have >= 2000 pairs");

  Rng data_rng = rng.fork(0xDA7A);
  auto dataset = sample_dataset(world, cfg.dataset_size, data_rng);

  // fit regression target standardization on the training set
  double em = 0, rm = 0;
  for (const auto& u : dataset) {
    em += u.factors.energy_level;
    rm += u.factors.rate_level;
  }
  em /= double(dataset.size());
  rm /= double(dataset.size());
  double ev = 0, rv = 0;
  for (const auto& u : dataset) {
    ev += (u.factors.energy_level - em) * (u.factors.energy_level - em);
    rv += (u.factors.rate_level - rm) * (u.factors.rate_level - rm);
  }
  enc.energy_mean = float(em);
  enc.energy_std = std::max(float(std::sqrt(ev / double(dataset.size()))), 1e-6f);
  enc.rate_mean = float(rm);
  enc.rate_std = std::max(float(std::sqrt(rv / double(dataset.size()))), 1e-6f);

  Adam<float> opt(enc.ps.list(), {.lr = cfg.lr});
  Rng step_rng = rng.fork(0x57E9);

  StyleTrainMetrics metrics;
  for (int step = 0; step < cfg.steps; ++step) {
    // assemble batch
    std::vector<const Utterance*> utts;
    std::vector<Tensor<float>> audio;
    std::vector<std::vector<int>> texts;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& u = dataset[size_t(step_rng.uniform_int(int64_t(dataset.size())))];
      utts.push_back(&u);
      audio.push_back(step_rng.bernoulli(cfg.perturb_prob)
                          ? timbre_perturb(world, u, step_rng)
                          : u.frames);
      auto toks = style_tokens(u.factors);
      std::vector<int> kept = {toks[0]};  // emotion word always kept
      if (!step_rng.bernoulli(cfg.descriptor_dropout)) kept.push_back(toks[1]);
      if (!step_rng.bernoulli(cfg.descriptor_dropout)) kept.push_back(toks[2]);
      texts.push_back(std::move(kept));
    }

    Tape<float> tape;
    std::vector<Tensor<float>> pre_rows, text_rows;
    for (int i = 0; i < cfg.batch; ++i) {
      pre_rows.push_back(enc.audio_pre(audio[size_t(i)]));
      text_rows.push_back(enc.encode_style_text(texts[size_t(i)]));
    }
    auto h_pre = concat_rows(pre_rows);            // [N, W]
    auto h_a = enc.project_audio(h_pre);           // [N, 32]
    auto h_t = concat_rows(text_rows);             // [N, 32]

    auto l_con = infonce_loss(h_a, h_t, enc.tau);

    std::vector<int> emo_targets;
    auto reg_target = Tensor<float>::zeros({int64_t(cfg.batch), 2});
    for (int i = 0; i < cfg.batch; ++i) {
      emo_targets.push_back(utts[size_t(i)]->factors.emotion);
      reg_target.data()[2 * i] =
          enc.standardized_energy(utts[size_t(i)]->factors.energy_level);
      reg_target.data()[2 * i + 1] =
          enc.standardized_rate(utts[size_t(i)]->factors.rate_level);
    }
    auto l_ce = softmax_cross_entropy(enc.emotion_logits(h_pre), emo_targets);
    auto l_mse = mse(enc.regression_outputs(h_pre), reg_target);
    auto total =
        style_total_loss(l_con, l_ce, l_mse, cfg.lambda_ce, cfg.lambda_mse);

    float lv = total.item();
    if (!std::isfinite(lv))
      fail("train_style_encoder: non-finite loss at step " +
           std::to_string(step));
    if (step % 50 == 0) metrics.loss_curve.push_back(lv);
    metrics.final_loss = lv;

    tape.backward(total);
    opt.step();
    opt.zero_grad();
    enc.clamp_tau();
  }

  Rng eval_rng = rng.fork(0xE7A1);
  auto grid = factor_grid_pairs(world, eval_rng);
  metrics.retrieval_top1 = retrieval_accuracy(enc, grid);
  return metrics;
}

inline Json style_extra_json(const StyleEncoder<float>& enc) {
  Json j;
  j["config"] = style_config_json(enc.cfg);
  j["channels"] = enc.channels;
  j["energy_mean"] = enc.energy_mean;
  j["energy_std"] = enc.energy_std;
  j["rate_mean"] = enc.rate_mean;
  j["rate_std"] = enc.rate_std;
  return j;
}

inline StyleEncoderConfig style_config_from_json(const Json& j) {
  StyleEncoderConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.width = j.at("width").get<int>();
  c.audio_blocks = j.at("audio_blocks").get<int>();
  c.text_blocks = j.at("text_blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.steps = j.at("steps").get<int>();
  c.batch = j.at("batch").get<int>();
  c.lr = j.at("lr").get<float>();
  c.lambda_ce = j.at("lambda_ce").get<float>();
  c.lambda_mse = j.at("lambda_mse").get<float>();
  c.tau_init = j.at("tau_init").get<float>();
  c.tau_min = j.at("tau_min").get<float>();
  c.tau_max = j.at("tau_max").get<float>();
  c.perturb_prob = j.at("perturb_prob").get<float>();
  c.descriptor_dropout = j.at("descriptor_dropout").get<float>();
  c.dataset_size = j.at("dataset_size").get<int>();
  return c;
}

}  // namespace flowtts
