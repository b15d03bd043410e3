#pragma once

// Oracle probes: gated shallow classifiers over the synthetic world, used to
// score generated output in place of external ASR/emotion/speaker models.
// Each probe must clear a held-out accuracy gate before anything downstream
// may consume its scores.

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowtts/adam.hpp"
#include "flowtts/nn.hpp"
#include "flowtts/world.hpp"

namespace flowtts {

// Multinomial logistic regression with input standardization.
struct SoftmaxProbe {
  Tensor<float> w;  // [F, C]
  Tensor<float> b;  // [C]
  std::vector<float> mu, sd;
  int classes = 0;

  std::vector<float> logits(const float* feat) const {
    int64_t f = w.rows();
    std::vector<float> out(size_t(classes), 0.0f);
    for (int c = 0; c < classes; ++c) {
      float acc = b.data()[c];
      for (int64_t i = 0; i < f; ++i)
        acc += w.data()[i * classes + c] * (feat[i] - mu[size_t(i)]) / sd[size_t(i)];
      out[size_t(c)] = acc;
    }
    return out;
  }

  int predict(const float* feat) const {
    auto l = logits(feat);
    return int(std::max_element(l.begin(), l.end()) - l.begin());
  }

  int predict(const std::vector<float>& feat) const { return predict(feat.data()); }
};

inline SoftmaxProbe train_softmax_probe(const std::vector<std::vector<float>>& x,
                                        const std::vector<int>& y, int classes,
                                        int steps = 400, float lr = 0.1f,
                                        uint64_t seed = 1) {
  if (x.empty() || x.size() != y.size())
    fail("train_softmax_probe: bad dataset");
  int64_t n = int64_t(x.size()), f = int64_t(x[0].size());

  SoftmaxProbe probe;
  probe.classes = classes;
  probe.mu.assign(size_t(f), 0.0f);
  probe.sd.assign(size_t(f), 0.0f);
  for (const auto& row : x)
    for (int64_t i = 0; i < f; ++i) probe.mu[size_t(i)] += row[size_t(i)];
  for (auto& m : probe.mu) m /= float(n);
  for (const auto& row : x)
    for (int64_t i = 0; i < f; ++i) {
      float d = row[size_t(i)] - probe.mu[size_t(i)];
      probe.sd[size_t(i)] += d * d;
    }
  for (auto& s : probe.sd) s = std::max(std::sqrt(s / float(n)), 1e-6f);

  auto xmat = Tensor<float>::zeros({n, f});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < f; ++j)
      xmat.data()[i * f + j] =
          (x[size_t(i)][size_t(j)] - probe.mu[size_t(j)]) / probe.sd[size_t(j)];

  ParamStore<float> ps(seed);
  probe.w = ps.randn("w", {f, int64_t(classes)}, float(1.0 / std::sqrt(double(f))));
  probe.b = ps.zeros("b", {int64_t(classes)});
  Adam<float> opt(ps.list(), {.lr = lr});
  for (int s = 0; s < steps; ++s) {
    Tape<float> tape;
    auto loss = softmax_cross_entropy(add_rowvec(matmul(xmat, probe.w), probe.b), y);
    tape.backward(loss);
    opt.step();
    opt.zero_grad();
  }
  return probe;
}

inline double probe_accuracy(const SoftmaxProbe& p,
                             const std::vector<std::vector<float>>& x,
                             const std::vector<int>& y) {
  int64_t hit = 0;
  for (size_t i = 0; i < x.size(); ++i)
    if (p.predict(x[i]) == y[i]) ++hit;
  return double(hit) / double(x.size());
}

// Pooled statistics of an utterance: per-channel mean, per-channel std, and
// per-channel mean |frame delta|.
inline std::vector<float> pooled_features(const Tensor<float>& frames) {
  int64_t t = frames.rows(), d = frames.cols();
  std::vector<float> feat(size_t(3 * d), 0.0f);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) feat[size_t(j)] += frames.data()[i * d + j];
  for (int64_t j = 0; j < d; ++j) feat[size_t(j)] /= float(t);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) {
      float dv = frames.data()[i * d + j] - feat[size_t(j)];
      feat[size_t(d + j)] += dv * dv;
    }
  for (int64_t j = 0; j < d; ++j)
    feat[size_t(d + j)] = std::sqrt(feat[size_t(d + j)] / float(t));
  if (t > 1) {
    for (int64_t i = 1; i < t; ++i)
      for (int64_t j = 0; j < d; ++j)
        feat[size_t(2 * d + j)] += std::abs(frames.data()[i * d + j] -
                                            frames.data()[(i - 1) * d + j]);
    for (int64_t j = 0; j < d; ++j) feat[size_t(2 * d + j)] /= float(t - 1);
  }
  return feat;
}

// Per-frame content features: the frame standardized per channel over the
// utterance (cancels the speaker affine and energy scale), plus a +-1 frame
// window mean that averages down the cycling emotion pattern.
inline std::vector<std::vector<float>> content_features(const Tensor<float>& frames) {
  int64_t t = frames.rows(), d = frames.cols();
  std::vector<float> mu(size_t(d), 0.0f), sd(size_t(d), 0.0f);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) mu[size_t(j)] += frames.data()[i * d + j];
  for (auto& m : mu) m /= float(t);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) {
      float dv = frames.data()[i * d + j] - mu[size_t(j)];
      sd[size_t(j)] += dv * dv;
    }
  for (auto& s : sd) s = std::max(std::sqrt(s / float(t)), 1e-6f);
  std::vector<std::vector<float>> z(static_cast<size_t>(t),
                                    std::vector<float>(static_cast<size_t>(d)));
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j)
      z[size_t(i)][size_t(j)] =
          (frames.data()[i * d + j] - mu[size_t(j)]) / sd[size_t(j)];
  std::vector<std::vector<float>> out(static_cast<size_t>(t),
                                      std::vector<float>(size_t(2 * d)));
  for (int64_t i = 0; i < t; ++i) {
    int64_t lo = std::max<int64_t>(0, i - 1), hi = std::min<int64_t>(t - 1, i + 1);
    for (int64_t j = 0; j < d; ++j) {
      float acc = 0;
      for (int64_t k = lo; k <= hi; ++k) acc += z[size_t(k)][size_t(j)];
      out[size_t(i)][size_t(j)] = z[size_t(i)][size_t(j)];
      out[size_t(i)][size_t(d + j)] = acc / float(hi - lo + 1);
    }
  }
  return out;
}

// tokens-per-frame thresholds at 3 and 5 frames/token
inline int decode_rate_level(int64_t total_frames, int64_t length) {
  double fpt = double(total_frames) / double(length);
  if (fpt < 3.0) return 2;
  if (fpt < 5.0) return 1;
  return 0;
}

struct Probes {
  SoftmaxProbe emotion, energy, speaker;  // pooled-statistics probes
  SoftmaxProbe content;                   // per-frame token probe
  double emotion_acc = 0, energy_acc = 0, speaker_acc = 0;
  double content_frame_acc = 0, content_decode_error = 1.0, rate_acc = 0;
  bool gate_passed = false;

  void require_gate() const {
    if (!gate_passed) fail("probes: accuracy gate has not passed");
  }
};

struct DecodeResult {
  StyleFactors factors;
  int speaker = -1;
  double content_error = 1.0;
};

inline DecodeResult decode_generated(const Probes& probes,
                                     const Tensor<float>& frames,
                                     const std::vector<int>& target_content) {
  probes.require_gate();
  if (frames.rows() < 1) fail("decode_generated: empty frames");
  if (target_content.empty()) fail("decode_generated: empty target content");

  DecodeResult r;
  auto pooled = pooled_features(frames);
  r.factors.emotion = probes.emotion.predict(pooled);
  r.factors.energy_level = probes.energy.predict(pooled);
  r.speaker = probes.speaker.predict(pooled);

  int64_t t = frames.rows(), l = int64_t(target_content.size());
  r.factors.rate_level = decode_rate_level(t, l);
  if (t < l) {
    r.content_error = 1.0;  // degenerate output, nothing to segment
    return r;
  }

  // per-frame classification, then majority vote within equal-length segments
  auto feats = content_features(frames);
  std::vector<int> frame_tokens(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i)
    frame_tokens[size_t(i)] = probes.content.predict(feats[size_t(i)]);
  int64_t mismatches = 0;
  for (int64_t i = 0; i < l; ++i) {
    int64_t lo = i * t / l, hi = (i + 1) * t / l;
    if (hi <= lo) hi = lo + 1;
    std::vector<int> counts(size_t(probes.content.classes), 0);
    for (int64_t k = lo; k < hi && k < t; ++k) ++counts[size_t(frame_tokens[size_t(k)])];
    int best = int(std::max_element(counts.begin(), counts.end()) - counts.begin());
    if (best != target_content[size_t(i)]) ++mismatches;
  }
  r.content_error = double(mismatches) / double(l);
  return r;
}

inline Probes train_probes(const World& w, int n_train, int n_heldout, Rng& rng) {
  if (n_train < 2000) fail("train_probes: n_train must be >= 2000");
  if (n_heldout < 100) fail("train_probes: n_heldout must be >= 100");

  auto train = sample_dataset(w, n_train, rng);
  auto heldout = sample_dataset(w, n_heldout, rng);

  std::vector<std::vector<float>> pooled_x;
  std::vector<int> emo_y, eng_y, spk_y;
  pooled_x.reserve(train.size());
  for (const auto& u : train) {
    pooled_x.push_back(pooled_features(u.frames));
    emo_y.push_back(u.factors.emotion);
    eng_y.push_back(u.factors.energy_level);
    spk_y.push_back(u.speaker_id);
  }

  Probes p;
  p.emotion = train_softmax_probe(pooled_x, emo_y, kNumEmotions, 400, 0.1f, 11);
  p.energy = train_softmax_probe(pooled_x, eng_y, kNumEnergyLevels, 400, 0.1f, 12);
  p.speaker = train_softmax_probe(pooled_x, spk_y, w.cfg.speakers, 400, 0.1f, 13);

  // frame-level content probe; cap the frame count to keep this quick
  const int64_t max_frames = 120000;
  std::vector<std::vector<float>> frame_x;
  std::vector<int> frame_y;
  for (const auto& u : train) {
    auto feats = content_features(u.frames);
    int64_t phi = 0;
    for (size_t i = 0; i < u.content.size(); ++i)
      for (int k = 0; k < u.durations[i]; ++k, ++phi) {
        frame_x.push_back(std::move(feats[size_t(phi)]));
        frame_y.push_back(u.content[i]);
      }
    if (int64_t(frame_x.size()) >= max_frames) break;
  }
  p.content = train_softmax_probe(frame_x, frame_y, w.cfg.vocab, 500, 0.1f, 14);

  // held-out evaluation
  int64_t emo_hit = 0, eng_hit = 0, spk_hit = 0, rate_hit = 0;
  int64_t frame_hit = 0, frame_n = 0;
  double decode_err_sum = 0;
  // temporary gate pass so decode_generated may run during evaluation
  p.gate_passed = true;
  for (const auto& u : heldout) {
    auto feat = pooled_features(u.frames);
    emo_hit += p.emotion.predict(feat) == u.factors.emotion;
    eng_hit += p.energy.predict(feat) == u.factors.energy_level;
    spk_hit += p.speaker.predict(feat) == u.speaker_id;
    rate_hit += decode_rate_level(u.total_frames(), u.length()) == u.factors.rate_level;
    auto feats = content_features(u.frames);
    int64_t phi = 0;
    for (size_t i = 0; i < u.content.size(); ++i)
      for (int k = 0; k < u.durations[i]; ++k, ++phi) {
        frame_hit += p.content.predict(feats[size_t(phi)]) == u.content[i];
        ++frame_n;
      }
    decode_err_sum += decode_generated(p, u.frames, u.content).content_error;
  }
  double n = double(heldout.size());
  p.emotion_acc = double(emo_hit) / n;
  p.energy_acc = double(eng_hit) / n;
  p.speaker_acc = double(spk_hit) / n;
  p.rate_acc = double(rate_hit) / n;
  p.content_frame_acc = double(frame_hit) / double(frame_n);
  p.content_decode_error = decode_err_sum / n;
  p.gate_passed = false;

  std::string failing;
  auto gate = [&](const char* name, double acc, double min) {
    if (acc < min) failing += std::string(failing.empty() ? "" : ", ") + name +
                              "=" + std::to_string(acc);
  };
  gate("emotion", p.emotion_acc, 0.98);
  gate("energy", p.energy_acc, 0.98);
  gate("speaker", p.speaker_acc, 0.98);
  gate("rate", p.rate_acc, 0.98);
  gate("content_decode", 1.0 - p.content_decode_error, 0.98);
  if (!failing.empty())
    fail("train_probes: accuracy gate failed for: " + failing);
  p.gate_passed = true;
  return p;
}

// Serialization of a trained probe set.
inline ParamList<float> probes_named_tensors(const Probes& p) {
  ParamList<float> out;
  auto push = [&out](const std::string& prefix, const SoftmaxProbe& sp) {
    out.push_back({prefix + ".w", sp.w});
    out.push_back({prefix + ".b", sp.b});
    out.push_back({prefix + ".mu",
                   Tensor<float>::from(std::vector<float>(sp.mu), {int64_t(sp.mu.size())})});
    out.push_back({prefix + ".sd",
                   Tensor<float>::from(std::vector<float>(sp.sd), {int64_t(sp.sd.size())})});
  };
  push("emotion", p.emotion);
  push("energy", p.energy);
  push("speaker", p.speaker);
  push("content", p.content);
  return out;
}

inline Json probes_extra_json(const Probes& p) {
  Json j;
  j["emotion_acc"] = p.emotion_acc;
  j["energy_acc"] = p.energy_acc;
  j["speaker_acc"] = p.speaker_acc;
  j["rate_acc"] = p.rate_acc;
  j["content_frame_acc"] = p.content_frame_acc;
  j["content_decode_error"] = p.content_decode_error;
  j["gate_passed"] = p.gate_passed;
  return j;
}

inline Probes probes_from_checkpoint(const std::map<std::string, Tensor<float>>& tensors,
                                     const Json& extra) {
  Probes p;
  auto pull = [&tensors](const std::string& prefix, SoftmaxProbe& sp) {
    sp.w = tensors.at(prefix + ".w");
    sp.b = tensors.at(prefix + ".b");
    auto mu = tensors.at(prefix + ".mu");
    auto sd = tensors.at(prefix + ".sd");
    sp.mu.assign(mu.data(), mu.data() + mu.numel());
    sp.sd.assign(sd.data(), sd.data() + sd.numel());
    sp.classes = int(sp.b.numel());
  };
  pull("emotion", p.emotion);
  pull("energy", p.energy);
  pull("speaker", p.speaker);
  pull("content", p.content);
  p.emotion_acc = extra.at("emotion_acc").get<double>();
  p.energy_acc = extra.at("energy_acc").get<double>();
  p.speaker_acc = extra.at("speaker_acc").get<double>();
  p.rate_acc = extra.at("rate_acc").get<double>();
  p.content_frame_acc = extra.at("content_frame_acc").get<double>();
  p.content_decode_error = extra.at("content_decode_error").get<double>();
  p.gate_passed = extra.at("gate_passed").get<bool>();
  return p;
}

}  // namespace flowtts
