#pragma once

// Desk-scale evaluation protocol: cross-speaker style transfer pairs,
// controllability/similarity/intelligibility metrics via the gated oracle
// probes, guidance sweeps, modality consistency, and timbre leakage checks.

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "flowtts/probes.hpp"
#include "flowtts/sampler.hpp"
#include "flowtts/training.hpp"

namespace flowtts {

// timbre from one utterance, style (and rate/emotion/energy targets) from an
// utterance of a different speaker; content freshly sampled
struct EvalPair {
  Utterance timbre_provider;
  Utterance style_provider;
  std::vector<int> target_content;
};

enum class Modality { Audio, Text };

inline const char* modality_name(Modality m) {
  return m == Modality::Audio ? "audio" : "text";
}

struct MetricsRow {
  double emotion_acc = 0, energy_acc = 0, rate_acc = 0, speaker_acc = 0;
  double content_error = 1.0;
};

// Style-provider factors cycle through all 45 combinations (marginals
// balanced within one count); timbre providers are drawn with a different
// speaker, derangement style.
inline std::vector<EvalPair> build_eval_pairs(const World& w,
                                              const std::vector<Utterance>& pool,
                                              int n, Rng& rng) {
  if (w.cfg.speakers < 2) fail("build_eval_pairs: need at least 2 speakers");
  if (pool.size() < 2) fail("build_eval_pairs: pool too small");

  std::vector<std::vector<int>> by_combo(kNumFactorCombos);
  for (size_t i = 0; i < pool.size(); ++i)
    by_combo[size_t(factor_combo_index(pool[i].factors))].push_back(int(i));

  std::vector<EvalPair> pairs;
  pairs.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    int combo = i % kNumFactorCombos;
    const auto& members = by_combo[size_t(combo)];
    Utterance style_u;
    if (!members.empty()) {
      style_u = pool[size_t(members[size_t(rng.uniform_int(int64_t(members.size())))])];
    } else {
      // combo unrepresented in the pool: render a fresh utterance for it
      StyleFactors f = factors_from_combo(combo);
      int L = int(rng.uniform_range(4, 12));
      std::vector<int> content(static_cast<size_t>(L));
      for (auto& c : content) c = int(rng.uniform_int(w.cfg.vocab));
      style_u = make_utterance(w, std::move(content), f,
                               int(rng.uniform_int(w.cfg.speakers)),
                               rng.next_u64());
    }
    Utterance timbre_u;
    do {
      timbre_u = pool[size_t(rng.uniform_int(int64_t(pool.size())))];
    } while (timbre_u.speaker_id == style_u.speaker_id);

    int L = int(rng.uniform_range(4, 12));
    std::vector<int> target(static_cast<size_t>(L));
    for (auto& c : target) c = int(rng.uniform_int(w.cfg.vocab));
    pairs.push_back({std::move(timbre_u), std::move(style_u), std::move(target)});
  }
  return pairs;
}

struct GenerationModels {
  const TTSModel<float>* tts = nullptr;
  const StyleEncoder<float>* style = nullptr;
  const LatentStats* stats = nullptr;
};

// Synthesize one evaluation pair and score it against the pair's targets.
inline MetricsRow eval_one_pair(const GenerationModels& m, const Probes& probes,
                                const EvalPair& pair, Modality modality,
                                const GuidanceScales& scales,
                                const SamplerConfig& cfg) {
  probes.require_gate();
  StylePrompt prompt =
      modality == Modality::Audio
          ? StylePrompt::audio(pair.style_provider.frames)
          : StylePrompt::text(style_tokens(pair.style_provider.factors));
  auto frames = infer(*m.tts, *m.style, *m.stats, pair.target_content,
                      pair.timbre_provider.frames, prompt, scales, cfg);
  auto decoded = decode_generated(probes, frames, pair.target_content);
  MetricsRow r;
  r.emotion_acc = decoded.factors.emotion == pair.style_provider.factors.emotion;
  r.energy_acc =
      decoded.factors.energy_level == pair.style_provider.factors.energy_level;
  r.rate_acc = decoded.factors.rate_level == pair.style_provider.factors.rate_level;
  r.speaker_acc = decoded.speaker == pair.timbre_provider.speaker_id;
  r.content_error = decoded.content_error;
  return r;
}

struct EvalResult {
  std::vector<MetricsRow> rows;  // one per pair, pair order
  MetricsRow mean;
};

inline MetricsRow mean_rows(const std::vector<MetricsRow>& rows) {
  MetricsRow m;
  m.content_error = 0;
  for (const auto& r : rows) {
    m.emotion_acc += r.emotion_acc;
    m.energy_acc += r.energy_acc;
    m.rate_acc += r.rate_acc;
    m.speaker_acc += r.speaker_acc;
    m.content_error += r.content_error;
  }
  double n = double(rows.size());
  m.emotion_acc /= n;
  m.energy_acc /= n;
  m.rate_acc /= n;
  m.speaker_acc /= n;
  m.content_error /= n;
  return m;
}

// Pair evaluations are independent; run them in parallel and merge by index.
inline EvalResult eval_generation(const GenerationModels& m, const Probes& probes,
                                  const std::vector<EvalPair>& pairs,
                                  Modality modality, const GuidanceScales& scales,
                                  const SamplerConfig& cfg,
                                  int max_threads = 0) {
  probes.require_gate();
  EvalResult res;
  res.rows.resize(pairs.size());
  parallel_for(
      int64_t(pairs.size()),
      [&](int64_t i) {
        SamplerConfig pair_cfg = cfg;
        pair_cfg.seed = mix_seed(cfg.seed, uint64_t(i));
        res.rows[size_t(i)] =
            eval_one_pair(m, probes, pairs[size_t(i)], modality, scales, pair_cfg);
      },
      max_threads);
  res.mean = mean_rows(res.rows);
  return res;
}

inline void write_pair_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                           Modality modality, const GuidanceScales& scales) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("write_pair_csv: cannot open '" + path + "'");
  out << "pair_id,modality,s_text,s_spk,s_style,emotion_acc,energy_acc,"
         "rate_acc,speaker_acc,content_error\n";
  for (size_t i = 0; i < rows.size(); ++i)
    out << i << "," << modality_name(modality) << "," << scales.text << ","
        << scales.spk << "," << scales.style << "," << rows[i].emotion_acc
        << "," << rows[i].energy_acc << "," << rows[i].rate_acc << ","
        << rows[i].speaker_acc << "," << rows[i].content_error << "\n";
}

// --- guidance sweep ------------------------------------------------------------

enum class SweepAxis { Speaker, Style };

struct SweepPoint {
  float scale = 0;
  MetricsRow metrics;
};

inline std::vector<SweepPoint> guidance_sweep(const GenerationModels& m,
                                              const Probes& probes,
                                              const std::vector<EvalPair>& pairs,
                                              SweepAxis axis,
                                              const std::vector<float>& grid,
                                              const GuidanceScales& fixed,
                                              const SamplerConfig& cfg) {
  if (grid.empty()) fail("guidance_sweep: empty grid");
  for (size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) fail("guidance_sweep: grid must be ascending");
  std::vector<SweepPoint> out;
  for (float s : grid) {
    GuidanceScales scales = fixed;
    (axis == SweepAxis::Speaker ? scales.spk : scales.style) = s;
    SweepPoint p;
    p.scale = s;
    p.metrics = eval_generation(m, probes, pairs, Modality::Audio, scales, cfg).mean;
    out.push_back(p);
  }
  return out;
}

inline void write_sweep_csv(const std::string& path,
                            const std::vector<SweepPoint>& points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("write_sweep_csv: cannot open '" + path + "'");
  out << "scale,speaker_acc,emotion_acc\n";
  for (const auto& p : points)
    out << p.scale << "," << p.metrics.speaker_acc << ","
        << p.metrics.emotion_acc << "\n";
}

// --- modality consistency & leakage ---------------------------------------------

// Agreement between audio-prompt and text-prompt generations' decoded style
// factors, per pair: the fraction of the three factors that match, averaged.
inline double modality_consistency(const GenerationModels& m, const Probes& probes,
                                   const std::vector<EvalPair>& pairs,
                                   const GuidanceScales& scales,
                                   const SamplerConfig& cfg) {
  probes.require_gate();
  std::vector<double> agree(pairs.size(), 0.0);
  parallel_for(int64_t(pairs.size()), [&](int64_t i) {
    const auto& pair = pairs[size_t(i)];
    SamplerConfig pair_cfg = cfg;
    pair_cfg.seed = mix_seed(cfg.seed, uint64_t(i));
    auto synth = [&](Modality mod) {
      StylePrompt prompt =
          mod == Modality::Audio
              ? StylePrompt::audio(pair.style_provider.frames)
              : StylePrompt::text(style_tokens(pair.style_provider.factors));
      auto frames = infer(*m.tts, *m.style, *m.stats, pair.target_content,
                          pair.timbre_provider.frames, prompt, scales, pair_cfg);
      return decode_generated(probes, frames, pair.target_content).factors;
    };
    auto fa = synth(Modality::Audio);
    auto ft = synth(Modality::Text);
    int same = (fa.emotion == ft.emotion) + (fa.energy_level == ft.energy_level) +
               (fa.rate_level == ft.rate_level);
    agree[size_t(i)] = double(same) / 3.0;
  });
  double acc = 0;
  for (double a : agree) acc += a;
  return acc / double(pairs.size());
}

struct LeakageReport {
  double speaker_acc_audio = 0;
  double speaker_acc_text = 0;
  double difference() const {
    return std::abs(speaker_acc_audio - speaker_acc_text);
  }
};

// Audio style prompting should not leak timbre: speaker accuracy w.r.t. the
// timbre provider must match between audio-style and text-style prompting.
inline LeakageReport timbre_leakage_check(const GenerationModels& m,
                                          const Probes& probes,
                                          const std::vector<EvalPair>& pairs,
                                          const GuidanceScales& scales,
                                          const SamplerConfig& cfg) {
  LeakageReport rep;
  rep.speaker_acc_audio =
      eval_generation(m, probes, pairs, Modality::Audio, scales, cfg).mean.speaker_acc;
  rep.speaker_acc_text =
      eval_generation(m, probes, pairs, Modality::Text, scales, cfg).mean.speaker_acc;
  return rep;
}

// Negative control for the leakage protocol: scoring speaker accuracy against
// the style provider instead of the timbre provider should come out much
// lower when timbre is properly disentangled.
inline double speaker_acc_vs_style_provider(const GenerationModels& m,
                                            const Probes& probes,
                                            const std::vector<EvalPair>& pairs,
                                            Modality modality,
                                            const GuidanceScales& scales,
                                            const SamplerConfig& cfg) {
  probes.require_gate();
  std::vector<double> hits(pairs.size(), 0.0);
  parallel_for(int64_t(pairs.size()), [&](int64_t i) {
    const auto& pair = pairs[size_t(i)];
    SamplerConfig pair_cfg = cfg;
    pair_cfg.seed = mix_seed(cfg.seed, uint64_t(i));
    StylePrompt prompt =
        modality == Modality::Audio
            ? StylePrompt::audio(pair.style_provider.frames)
            : StylePrompt::text(style_tokens(pair.style_provider.factors));
    auto frames = infer(*m.tts, *m.style, *m.stats, pair.target_content,
                        pair.timbre_provider.frames, prompt, scales, pair_cfg);
    auto decoded = decode_generated(probes, frames, pair.target_content);
    hits[size_t(i)] = decoded.speaker == pair.style_provider.speaker_id;
  });
  double acc = 0;
  for (double h : hits) acc += h;
  return acc / double(pairs.size());
}

// --- embedding probes (style-space disentanglement) ------------------------------

struct EmbeddingProbeReport {
  double speaker_probe_acc = 0;  // should stay near chance
  double emotion_probe_acc = 0;  // should stay high
};

// Train fresh linear probes on audio-branch embeddings: speaker identity must
// not be recoverable while emotion must be.
inline EmbeddingProbeReport style_embedding_probes(const World& world,
                                                   const StyleEncoder<float>& enc,
                                                   int n_train, int n_eval,
                                                   Rng& rng) {
  auto collect = [&](int n, std::vector<std::vector<float>>& x,
                     std::vector<int>& spk, std::vector<int>& emo) {
    for (int i = 0; i < n; ++i) {
      auto u = sample_utterance(world, rng);
      auto h = enc.encode_audio(u.frames);
      x.emplace_back(h.data(), h.data() + h.numel());
      spk.push_back(u.speaker_id);
      emo.push_back(u.factors.emotion);
    }
  };
  std::vector<std::vector<float>> xtr, xev;
  std::vector<int> spk_tr, emo_tr, spk_ev, emo_ev;
  collect(n_train, xtr, spk_tr, emo_tr);
  collect(n_eval, xev, spk_ev, emo_ev);

  EmbeddingProbeReport rep;
  auto spk_probe = train_softmax_probe(xtr, spk_tr, world.cfg.speakers, 400, 0.1f, 21);
  auto emo_probe = train_softmax_probe(xtr, emo_tr, kNumEmotions, 400, 0.1f, 22);
  rep.speaker_probe_acc = probe_accuracy(spk_probe, xev, spk_ev);
  rep.emotion_probe_acc = probe_accuracy(emo_probe, xev, emo_ev);
  return rep;
}

}  // namespace flowtts
