#pragma once

// Synthetic factorized speech world. Latent frames are produced from known
// content/timbre/style factors by a fixed generative formula, so every factor
// of a generated utterance can be decoded and scored exactly.
//
// Frame formula, token i occupying global frame indices phi:
//   x_phi = gain_s * (amp_g * (codebook[c_i] + pattern_e[phi mod K]))
//           + offset_s + sigma * eps_phi

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowtts/adam.hpp"
#include "flowtts/common.hpp"
#include "flowtts/tensor.hpp"

namespace flowtts {

using Json = nlohmann::json;

inline constexpr int kNumEmotions = 5;
inline constexpr int kNumEnergyLevels = 3;
inline constexpr int kNumRateLevels = 3;

// amplitude by energy level, frames-per-token by rate level
inline constexpr std::array<float, 3> kEnergyAmplitude = {0.5f, 1.0f, 2.0f};
inline constexpr std::array<int, 3> kFramesPerToken = {6, 4, 2};

struct StyleFactors {
  int emotion = 0;      // {0..4}: happy, sad, angry, neutral, fearful
  int energy_level = 0; // {0,1,2}
  int rate_level = 0;   // {0,1,2}

  bool operator==(const StyleFactors&) const = default;
};

inline void validate_factors(const StyleFactors& f) {
  if (f.emotion < 0 || f.emotion >= kNumEmotions ||
      f.energy_level < 0 || f.energy_level >= kNumEnergyLevels ||
      f.rate_level < 0 || f.rate_level >= kNumRateLevels)
    fail("invalid style factors (" + std::to_string(f.emotion) + "," +
         std::to_string(f.energy_level) + "," + std::to_string(f.rate_level) +
         ")");
}

// 45 distinct factor combinations, indexed densely
inline constexpr int kNumFactorCombos =
    kNumEmotions * kNumEnergyLevels * kNumRateLevels;

inline int factor_combo_index(const StyleFactors& f) {
  return (f.emotion * kNumEnergyLevels + f.energy_level) * kNumRateLevels +
         f.rate_level;
}

inline StyleFactors factors_from_combo(int idx) {
  StyleFactors f;
  f.rate_level = idx % kNumRateLevels;
  f.energy_level = (idx / kNumRateLevels) % kNumEnergyLevels;
  f.emotion = idx / (kNumRateLevels * kNumEnergyLevels);
  return f;
}

// Style descriptor vocabulary: 5 emotion + 3 energy + 3 rate words. Speaker
// identity has no words here on purpose.
inline constexpr int kStyleVocab = 11;
inline constexpr int kEnergyWordBase = kNumEmotions;
inline constexpr int kRateWordBase = kNumEmotions + kNumEnergyLevels;

inline const char* style_word(int token) {
  static const char* words[kStyleVocab] = {
      "happy", "sad",    "angry",  "neutral", "fearful", "soft",
      "medium", "loud",  "slow",   "steady",  "fast"};
  if (token < 0 || token >= kStyleVocab)
    fail("style_word: unknown token " + std::to_string(token));
  return words[token];
}

// descriptor triple, ordered [emotion, energy, rate]
inline std::vector<int> style_tokens(const StyleFactors& f) {
  validate_factors(f);
  return {f.emotion, kEnergyWordBase + f.energy_level,
          kRateWordBase + f.rate_level};
}

struct WorldConfig {
  uint64_t seed = 123;
  int vocab = 16;
  int channels = 16;
  int pattern_len = 8;
  int speakers = 20;
  float noise_sigma = 0.05f;
};

struct World {
  WorldConfig cfg;
  Tensor<float> codebook;               // [V, D], unit-norm rows
  std::vector<Tensor<float>> patterns;  // per emotion, [K, D] orthonormal rows
  Tensor<float> gains;                  // [S, D], U(0.8, 1.25)
  Tensor<float> offsets;                // [S, D], N(0, I) * 0.8

  int teacher_dim() const { return kNumEmotions + cfg.vocab + 2; }
};

inline World make_world(const WorldConfig& cfg) {
  if (cfg.vocab <= 0 || cfg.channels <= 0 || cfg.pattern_len <= 0 ||
      cfg.speakers <= 0)
    fail("make_world: extents must be positive");
  if (cfg.channels < 5)
    fail("make_world: channels must be >= 5 (teacher features require room)");
  if (cfg.pattern_len > cfg.channels)
    fail("make_world: pattern_len exceeds channels; rows cannot be orthonormal");

  World w;
  w.cfg = cfg;
  Rng rng(cfg.seed);

  // unit-norm content codebook rows
  w.codebook = Tensor<float>::zeros({cfg.vocab, cfg.channels});
  for (int v = 0; v < cfg.vocab; ++v) {
    double n2 = 0;
    std::vector<double> row(size_t(cfg.channels));
    for (int d = 0; d < cfg.channels; ++d) {
      row[size_t(d)] = rng.normal();
      n2 += row[size_t(d)] * row[size_t(d)];
    }
    double n = std::sqrt(n2);
    for (int d = 0; d < cfg.channels; ++d)
      w.codebook.data()[v * cfg.channels + d] = float(row[size_t(d)] / n);
  }

  // orthonormal emotion pattern rows via modified Gram-Schmidt
  for (int e = 0; e < kNumEmotions; ++e) {
    std::vector<std::vector<double>> rows(size_t(cfg.pattern_len),
                                          std::vector<double>(size_t(cfg.channels)));
    for (auto& r : rows)
      for (auto& x : r) x = rng.normal();
    for (int i = 0; i < cfg.pattern_len; ++i) {
      for (int j = 0; j < i; ++j) {
        double dot = 0;
        for (int d = 0; d < cfg.channels; ++d)
          dot += rows[size_t(i)][size_t(d)] * rows[size_t(j)][size_t(d)];
        for (int d = 0; d < cfg.channels; ++d)
          rows[size_t(i)][size_t(d)] -= dot * rows[size_t(j)][size_t(d)];
      }
      double n2 = 0;
      for (int d = 0; d < cfg.channels; ++d)
        n2 += rows[size_t(i)][size_t(d)] * rows[size_t(i)][size_t(d)];
      double n = std::sqrt(n2);
      if (n < 1e-9) fail("make_world: degenerate pattern row");
      for (int d = 0; d < cfg.channels; ++d) rows[size_t(i)][size_t(d)] /= n;
    }
    auto p = Tensor<float>::zeros({cfg.pattern_len, cfg.channels});
    for (int i = 0; i < cfg.pattern_len; ++i)
      for (int d = 0; d < cfg.channels; ++d)
        p.data()[i * cfg.channels + d] = float(rows[size_t(i)][size_t(d)]);
    w.patterns.push_back(p);
  }

  // speaker affine transforms
  w.gains = Tensor<float>::zeros({cfg.speakers, cfg.channels});
  w.offsets = Tensor<float>::zeros({cfg.speakers, cfg.channels});
  for (int s = 0; s < cfg.speakers; ++s)
    for (int d = 0; d < cfg.channels; ++d) {
      w.gains.data()[s * cfg.channels + d] = float(rng.uniform(0.8, 1.25));
      w.offsets.data()[s * cfg.channels + d] = float(rng.normal() * 0.8);
    }
  return w;
}

inline ParamList<float> world_named_tensors(const World& w) {
  ParamList<float> out;
  out.push_back({"codebook", w.codebook});
  for (int e = 0; e < kNumEmotions; ++e)
    out.push_back({"pattern." + std::to_string(e), w.patterns[size_t(e)]});
  out.push_back({"gains", w.gains});
  out.push_back({"offsets", w.offsets});
  return out;
}

inline Json world_config_json(const WorldConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["vocab"] = cfg.vocab;
  j["channels"] = cfg.channels;
  j["pattern_len"] = cfg.pattern_len;
  j["speakers"] = cfg.speakers;
  j["noise_sigma"] = cfg.noise_sigma;
  return j;
}

inline WorldConfig world_config_from_json(const Json& j) {
  WorldConfig cfg;
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.vocab = j.at("vocab").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.pattern_len = j.at("pattern_len").get<int>();
  cfg.speakers = j.at("speakers").get<int>();
  cfg.noise_sigma = j.at("noise_sigma").get<float>();
  return cfg;
}

// frames [T, D]; sigma_override >= 0 replaces the world's observation noise
inline Tensor<float> render_frames(const World& w, const std::vector<int>& content,
                                   const StyleFactors& factors, int speaker_id,
                                   uint64_t noise_seed,
                                   float sigma_override = -1.0f) {
  validate_factors(factors);
  if (content.empty()) fail("render_frames: empty content");
  for (int c : content)
    if (c < 0 || c >= w.cfg.vocab)
      fail("render_frames: token " + std::to_string(c) + " out of vocabulary");
  if (speaker_id < 0 || speaker_id >= w.cfg.speakers)
    fail("render_frames: speaker " + std::to_string(speaker_id) +
         " out of range");

  const int d_per_tok = kFramesPerToken[size_t(factors.rate_level)];
  const float amp = kEnergyAmplitude[size_t(factors.energy_level)];
  const int D = w.cfg.channels, K = w.cfg.pattern_len;
  const int64_t T = int64_t(content.size()) * d_per_tok;
  const float sigma = sigma_override >= 0 ? sigma_override : w.cfg.noise_sigma;

  const float* gain = w.gains.data() + speaker_id * D;
  const float* offs = w.offsets.data() + speaker_id * D;
  const Tensor<float>& pat = w.patterns[size_t(factors.emotion)];

  Rng noise(noise_seed);
  auto frames = Tensor<float>::zeros({T, D});
  int64_t phi = 0;
  for (int tok : content) {
    const float* code = w.codebook.data() + tok * D;
    for (int k = 0; k < d_per_tok; ++k, ++phi) {
      const float* prow = pat.data() + (phi % K) * D;
      float* x = frames.data() + phi * D;
      for (int d = 0; d < D; ++d) {
        float eps = float(noise.normal());
        x[d] = gain[d] * (amp * (code[d] + prow[d])) + offs[d] + sigma * eps;
      }
    }
  }
  return frames;
}

struct Utterance {
  std::vector<int> content;    // token ids, L in [4,12]
  std::vector<int> durations;  // frames per token, all d[rate_level]
  StyleFactors factors;
  int speaker_id = 0;
  uint64_t noise_seed = 0;
  Tensor<float> frames;        // [T, D], T = sum(durations)

  int64_t length() const { return int64_t(content.size()); }
  int64_t total_frames() const { return frames.rows(); }
};

inline Utterance make_utterance(const World& w, std::vector<int> content,
                                const StyleFactors& factors, int speaker_id,
                                uint64_t noise_seed) {
  Utterance u;
  u.content = std::move(content);
  u.factors = factors;
  u.speaker_id = speaker_id;
  u.noise_seed = noise_seed;
  u.durations.assign(u.content.size(),
                     kFramesPerToken[size_t(factors.rate_level)]);
  u.frames = render_frames(w, u.content, factors, speaker_id, noise_seed);
  return u;
}

inline Utterance sample_utterance(const World& w, Rng& rng) {
  StyleFactors f;
  f.emotion = int(rng.uniform_int(kNumEmotions));
  f.energy_level = int(rng.uniform_int(kNumEnergyLevels));
  f.rate_level = int(rng.uniform_int(kNumRateLevels));
  int L = int(rng.uniform_range(4, 12));
  std::vector<int> content(static_cast<size_t>(L));
  for (auto& c : content) c = int(rng.uniform_int(w.cfg.vocab));
  int speaker = int(rng.uniform_int(w.cfg.speakers));
  return make_utterance(w, std::move(content), f, speaker, rng.next_u64());
}

// Analytic teacher: per latent frame the row
//   [one-hot emotion (5) | one-hot content token (V) | amplitude | tokens/frame]
// duplicated twice along time, so the teacher runs at 2x the latent rate and
// exercises the upsample-and-project alignment path.
inline Tensor<float> teacher_features(const World& w, const Utterance& u) {
  const int V = w.cfg.vocab;
  const int Dw = w.teacher_dim();
  const int64_t T = u.total_frames();
  const float amp = kEnergyAmplitude[size_t(u.factors.energy_level)];
  const float tokens_per_frame =
      1.0f / float(kFramesPerToken[size_t(u.factors.rate_level)]);

  auto out = Tensor<float>::zeros({2 * T, Dw});
  int64_t phi = 0;
  for (size_t i = 0; i < u.content.size(); ++i) {
    for (int k = 0; k < u.durations[i]; ++k, ++phi) {
      for (int rep = 0; rep < 2; ++rep) {
        float* row = out.data() + (2 * phi + rep) * Dw;
        row[u.factors.emotion] = 1.0f;
        row[kNumEmotions + u.content[i]] = 1.0f;
        row[kNumEmotions + V] = amp;
        row[kNumEmotions + V + 1] = tokens_per_frame;
      }
    }
  }
  return out;
}

// Re-render with a random different speaker, keeping content, factors and
// noise stream. The desk analog of formant perturbation: timbre moves, style
// stays.
inline Tensor<float> timbre_perturb(const World& w, const Utterance& u,
                                    Rng& rng, int* new_speaker = nullptr) {
  if (w.cfg.speakers < 2) fail("timbre_perturb: need at least 2 speakers");
  int other = int(rng.uniform_int(w.cfg.speakers - 1));
  if (other >= u.speaker_id) ++other;
  if (new_speaker) *new_speaker = other;
  return render_frames(w, u.content, u.factors, other, u.noise_seed);
}

// --- dataset manifest -------------------------------------------------------
// Only descriptors are stored; frames are always regenerated.

inline Json utterance_descriptor(const Utterance& u) {
  Json j;
  j["content"] = u.content;
  j["emotion"] = u.factors.emotion;
  j["energy"] = u.factors.energy_level;
  j["rate"] = u.factors.rate_level;
  j["speaker"] = u.speaker_id;
  j["noise_seed"] = u.noise_seed;
  return j;
}

inline Utterance utterance_from_descriptor(const World& w, const Json& j) {
  StyleFactors f;
  f.emotion = j.at("emotion").get<int>();
  f.energy_level = j.at("energy").get<int>();
  f.rate_level = j.at("rate").get<int>();
  return make_utterance(w, j.at("content").get<std::vector<int>>(), f,
                        j.at("speaker").get<int>(),
                        j.at("noise_seed").get<uint64_t>());
}

inline Json dataset_manifest(const std::vector<Utterance>& utts) {
  Json j = Json::array();
  for (const auto& u : utts) j.push_back(utterance_descriptor(u));
  return j;
}

inline std::vector<Utterance> dataset_from_manifest(const World& w,
                                                    const Json& j) {
  std::vector<Utterance> out;
  out.reserve(j.size());
  for (const auto& d : j) out.push_back(utterance_from_descriptor(w, d));
  return out;
}

inline std::vector<Utterance> sample_dataset(const World& w, int n, Rng& rng) {
  std::vector<Utterance> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(sample_utterance(w, rng));
  return out;
}

}  // namespace flowtts
