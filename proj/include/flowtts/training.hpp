#pragma once

// Flow-matching training: linear noise-to-data paths, hierarchical condition
// dropout, feature alignment against the analytic teacher, and duration
// supervision on detached inputs.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flowtts/checkpoint.hpp"
#include "flowtts/style_encoder.hpp"
#include "flowtts/tts_model.hpp"
#include "flowtts/world.hpp"

namespace flowtts {

// --- latent standardization -------------------------------------------------

struct LatentStats {
  std::vector<float> mean, std;
};

inline LatentStats compute_latent_stats(const std::vector<Utterance>& utts) {
  if (utts.empty()) fail("compute_latent_stats: empty dataset");
  int64_t d = utts[0].frames.cols();
  LatentStats s;
  s.mean.assign(size_t(d), 0.0f);
  s.std.assign(size_t(d), 0.0f);
  int64_t n = 0;
  for (const auto& u : utts) {
    const auto& f = u.frames;
    for (int64_t i = 0; i < f.rows(); ++i)
      for (int64_t j = 0; j < d; ++j) s.mean[size_t(j)] += f.data()[i * d + j];
    n += f.rows();
  }
  for (auto& m : s.mean) m /= float(n);
  for (const auto& u : utts) {
    const auto& f = u.frames;
    for (int64_t i = 0; i < f.rows(); ++i)
      for (int64_t j = 0; j < d; ++j) {
        float dv = f.data()[i * d + j] - s.mean[size_t(j)];
        s.std[size_t(j)] += dv * dv;
      }
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v / float(n)), 1e-6f);
  return s;
}

template <class S>
Tensor<S> standardize_frames(const Tensor<float>& frames, const LatentStats& st) {
  int64_t t = frames.rows(), d = frames.cols();
  auto out = Tensor<S>::zeros({t, d});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j)
      out.data()[i * d + j] = (S(frames.data()[i * d + j]) - S(st.mean[size_t(j)])) /
                              S(st.std[size_t(j)]);
  return out;
}

inline Tensor<float> destandardize_frames(const Tensor<float>& frames,
                                          const LatentStats& st) {
  int64_t t = frames.rows(), d = frames.cols();
  auto out = Tensor<float>::zeros({t, d});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j)
      out.data()[i * d + j] =
          frames.data()[i * d + j] * st.std[size_t(j)] + st.mean[size_t(j)];
  return out;
}

// --- flow path ---------------------------------------------------------------

// state = (1-t)*noise + t*data, target = data - noise; t=0 is noise, t=1 data.
template <class S>
struct FlowSample {
  Tensor<S> data;    // standardized latents [T, D]
  Tensor<S> noise;   // [T, D]
  S t = S(0);
  Tensor<S> state;   // [T, D]
  Tensor<S> target;  // [T, D]
  std::vector<uint8_t> mask;  // valid-frame flags
};

template <class S>
FlowSample<S> cfm_sample_at(const Tensor<S>& data, const Tensor<S>& noise, S t) {
  detail::check_same_shape("cfm_sample_at", data, noise);
  FlowSample<S> fs;
  fs.data = data;
  fs.noise = noise;
  fs.t = t;
  fs.state = Tensor<S>::zeros(data.shape());
  fs.target = Tensor<S>::zeros(data.shape());
  for (int64_t i = 0; i < data.numel(); ++i) {
    fs.state.data()[i] = (S(1) - t) * noise.data()[i] + t * data.data()[i];
    fs.target.data()[i] = data.data()[i] - noise.data()[i];
  }
  fs.mask.assign(size_t(data.rows()), 1);
  return fs;
}

template <class S>
FlowSample<S> cfm_make_sample(const Tensor<S>& data, Rng& rng) {
  S t = S(rng.uniform());
  auto noise = Tensor<S>::zeros(data.shape());
  for (int64_t i = 0; i < noise.numel(); ++i) noise.data()[i] = S(rng.normal());
  return cfm_sample_at(data, noise, t);
}

// mean squared error over valid frames only
template <class S>
Tensor<S> flow_loss(const Tensor<S>& v_pred, const Tensor<S>& target,
                    const std::vector<uint8_t>& mask) {
  return masked_mse(v_pred, target, mask);
}

// --- hierarchical condition dropout ------------------------------------------

struct DropoutPolicy {
  float p_style = 0.3f;
  float p_spk = 0.5f;   // conditional on style dropped
  float p_text = 0.5f;  // conditional on style and speaker dropped
};

struct PresenceFlags {
  bool style = true, spk = true, text = true;
  bool operator==(const PresenceFlags&) const = default;
};

// Chained procedure: style drops first; timbre may drop only if style did;
// text may drop only if both did. Reachable sets: {all}, {text,spk}, {text},
// {}.
inline PresenceFlags hierarchical_dropout(const DropoutPolicy& p, Rng& rng) {
  PresenceFlags f;
  if (rng.bernoulli(p.p_style)) {
    f.style = false;
    if (rng.bernoulli(p.p_spk)) {
      f.spk = false;
      if (rng.bernoulli(p.p_text)) f.text = false;
    }
  }
  return f;
}

// --- datasets ----------------------------------------------------------------

struct TrainDataset {
  std::vector<Utterance> utts;
  std::vector<std::vector<int>> by_speaker;
};

inline TrainDataset build_train_dataset(const World& w, int n, Rng& rng) {
  TrainDataset ds;
  ds.utts = sample_dataset(w, n, rng);
  ds.by_speaker.assign(size_t(w.cfg.speakers), {});
  for (size_t i = 0; i < ds.utts.size(); ++i)
    ds.by_speaker[size_t(ds.utts[i].speaker_id)].push_back(int(i));
  // reference picking wants at least two utterances per speaker
  for (int s = 0; s < w.cfg.speakers; ++s)
    while (ds.by_speaker[size_t(s)].size() < 2) {
      auto u = sample_utterance(w, rng);
      u.speaker_id = s;
      u.frames = render_frames(w, u.content, u.factors, s, u.noise_seed);
      ds.by_speaker[size_t(s)].push_back(int(ds.utts.size()));
      ds.utts.push_back(std::move(u));
    }
  return ds;
}

// Uniform pick of a different utterance from the same speaker; a singleton
// speaker falls back to the target itself (counted).
inline int pick_speaker_reference(const TrainDataset& ds, int target_idx,
                                  Rng& rng) {
  const auto& peers = ds.by_speaker[size_t(ds.utts[size_t(target_idx)].speaker_id)];
  if (peers.size() < 2) {
    EventCounters::singleton_speaker_fallback()++;
    return target_idx;
  }
  int pick = int(rng.uniform_int(int64_t(peers.size() - 1)));
  int idx = 0;
  for (int p : peers)
    if (p != target_idx && pick-- == 0) {
      idx = p;
      break;
    }
  return idx;
}

// --- auxiliary losses ----------------------------------------------------------

// 1 - mean_t cos(project(upsample(student))_t, teacher_t); teacher runs at
// exactly twice the student rate.
template <class S>
Tensor<S> repa_loss(const Tensor<S>& student, const Tensor<S>& teacher,
                    const Linear<S>& projector) {
  if (teacher.rows() != 2 * student.rows())
    fail("repa_loss: teacher length " + std::to_string(teacher.rows()) +
         " is not exactly twice student length " +
         std::to_string(student.rows()));
  auto projected = projector(upsample_rows2(student));
  return sub(Tensor<S>::scalar(S(1)), cosine_rows_mean(projected, teacher));
}

// mean squared error between predicted log-durations and ln(true)
template <class S>
Tensor<S> duration_loss(const Tensor<S>& pred_log_dur,
                        const std::vector<int>& true_durations) {
  if (int64_t(true_durations.size()) != pred_log_dur.rows())
    fail("duration_loss: " + std::to_string(true_durations.size()) +
         " targets for " + std::to_string(pred_log_dur.rows()) + " rows");
  auto target = Tensor<S>::zeros(pred_log_dur.shape());
  for (size_t i = 0; i < true_durations.size(); ++i) {
    if (true_durations[i] < 1) fail("duration_loss: durations must be >= 1");
    target.data()[i] = S(std::log(double(true_durations[i])));
  }
  return mse(pred_log_dur, target);
}

// --- training objective --------------------------------------------------------

struct LossWeights {
  float lambda_repa = 0.5f;
  float lambda_dur = 0.1f;
};

// One training sample with all randomness resolved up front, so the graph can
// be rebuilt bit-identically (gradient checking, determinism tests).
template <class S>
struct SamplePlan {
  const Utterance* utt = nullptr;
  const Utterance* reference = nullptr;
  PresenceFlags flags;
  S t = S(0);
  Tensor<S> noise;
};

template <class S>
SamplePlan<S> make_sample_plan(const TrainDataset& ds, const DropoutPolicy& policy,
                               const LatentStats& stats, Rng& rng) {
  SamplePlan<S> plan;
  int idx = int(rng.uniform_int(int64_t(ds.utts.size())));
  plan.utt = &ds.utts[size_t(idx)];
  plan.reference = &ds.utts[size_t(pick_speaker_reference(ds, idx, rng))];
  plan.flags = hierarchical_dropout(policy, rng);
  plan.t = S(rng.uniform());
  plan.noise = Tensor<S>::zeros({plan.utt->total_frames(), int64_t(stats.mean.size())});
  for (int64_t i = 0; i < plan.noise.numel(); ++i)
    plan.noise.data()[i] = S(rng.normal());
  return plan;
}

template <class S>
struct BatchLosses {
  Tensor<S> flow, repa, dur, total;
};

// The full step objective: L_flow + lambda_repa * L_repa + lambda_dur * L_dur,
// averaged over the batch. The style condition comes from the frozen style
// encoder's audio branch on the target utterance's own frames; alignment runs
// every step regardless of dropout flags.
template <class S>
BatchLosses<S> batch_objective(const World& world, const TTSModel<S>& model,
                               const StyleEncoder<S>& style_enc,
                               const LatentStats& stats,
                               const std::vector<SamplePlan<S>>& plans,
                               const LossWeights& weights) {
  if (plans.empty()) fail("batch_objective: empty batch");
  Tensor<S> flow_sum, repa_sum, dur_sum;
  auto accum = [](Tensor<S>& acc, const Tensor<S>& x) {
    acc = acc.defined() ? add(acc, x) : x;
  };

  for (const auto& plan : plans) {
    const Utterance& u = *plan.utt;

    Tensor<S> c_style_frozen;
    {
      NoGrad<S> frozen;
      c_style_frozen = style_enc.encode_audio(u.frames);
    }

    auto z0 = standardize_frames<S>(u.frames, stats);
    auto fs = cfm_sample_at(z0, plan.noise, plan.t);

    auto token_feats = model.encode_content(u.content);
    auto c_text = length_regulate(token_feats, u.durations);
    auto c_spk = model.encode_speaker(plan.reference->frames);

    ConditionSet<S> cond;
    if (plan.flags.text) cond.text = c_text;
    if (plan.flags.spk) cond.spk = c_spk;
    if (plan.flags.style) cond.style = c_style_frozen;

    auto out = model.dit_forward(fs.state, fs.t, cond);
    accum(flow_sum, flow_loss(out.velocity, fs.target, fs.mask));

    auto teacher_f32 = teacher_features(world, u);
    Tensor<S> teacher = Tensor<S>::zeros(teacher_f32.shape());
    for (int64_t i = 0; i < teacher.numel(); ++i)
      teacher.data()[i] = S(teacher_f32.data()[i]);
    accum(repa_sum, repa_loss(out.student, teacher, model.repa_proj));

    // duration supervision sees detached inputs only
    auto dur_style = plan.flags.style
                         ? detach(c_style_frozen)
                         : detach(reshape(model.null_style,
                                          {1, int64_t(model.cfg.style_dim)}));
    auto pred = model.predict_durations(detach(token_feats), dur_style);
    accum(dur_sum, duration_loss(pred, u.durations));
  }

  S inv_n = S(1) / S(plans.size());
  BatchLosses<S> out;
  out.flow = scale(flow_sum, inv_n);
  out.repa = scale(repa_sum, inv_n);
  out.dur = scale(dur_sum, inv_n);
  out.total = add(out.flow, add(scale(out.repa, S(weights.lambda_repa)),
                                scale(out.dur, S(weights.lambda_dur))));
  return out;
}

// --- training loop --------------------------------------------------------------

struct TrainConfig {
  uint64_t seed = 31;
  int steps = 6000;
  int batch = 16;
  float lr = 1e-3f;
  float warmup_frac = 0.05f;
  DropoutPolicy dropout;
  LossWeights weights;
  int dataset_size = 2000;
  int eval_interval = 500;       // 0 disables periodic evaluation
  int eval_pairs = 24;           // pair budget for tracking evaluations
  int eval_sampler_steps = 16;   // sampler budget for tracking evaluations
  int checkpoint_interval = 0;   // 0 = final checkpoint only
};

inline Json train_config_json(const TrainConfig& c) {
  return Json{{"seed", c.seed},
              {"steps", c.steps},
              {"batch", c.batch},
              {"lr", c.lr},
              {"warmup_frac", c.warmup_frac},
              {"p_style", c.dropout.p_style},
              {"p_spk", c.dropout.p_spk},
              {"p_text", c.dropout.p_text},
              {"lambda_repa", c.weights.lambda_repa},
              {"lambda_dur", c.weights.lambda_dur},
              {"dataset_size", c.dataset_size},
              {"eval_interval", c.eval_interval},
              {"eval_pairs", c.eval_pairs},
              {"eval_sampler_steps", c.eval_sampler_steps},
              {"checkpoint_interval", c.checkpoint_interval}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.steps = j.at("steps").get<int>();
  c.batch = j.at("batch").get<int>();
  c.lr = j.at("lr").get<float>();
  c.warmup_frac = j.at("warmup_frac").get<float>();
  c.dropout.p_style = j.at("p_style").get<float>();
  c.dropout.p_spk = j.at("p_spk").get<float>();
  c.dropout.p_text = j.at("p_text").get<float>();
  c.weights.lambda_repa = j.at("lambda_repa").get<float>();
  c.weights.lambda_dur = j.at("lambda_dur").get<float>();
  c.dataset_size = j.at("dataset_size").get<int>();
  c.eval_interval = j.at("eval_interval").get<int>();
  c.eval_pairs = j.at("eval_pairs").get<int>();
  c.eval_sampler_steps = j.at("eval_sampler_steps").get<int>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
  return c;
}

inline float warmup_lr(float base_lr, int step, int total_steps, float frac) {
  int warmup = std::max(1, int(std::lround(double(total_steps) * double(frac))));
  if (step >= warmup) return base_lr;
  return base_lr * float(step) / float(warmup);
}

struct EvalMetricsRow {
  double emotion_acc = 0, energy_acc = 0, rate_acc = 0, speaker_acc = 0;
  double content_error = 1.0;
};

using EvalCallback = std::function<EvalMetricsRow(int step)>;

inline const char* kMetricsHeader =
    "step,L_flow,L_repa,L_dur,emotion_acc,energy_acc,rate_acc,speaker_acc,"
    "content_error";

struct TrainHistory {
  std::vector<std::array<float, 4>> losses;            // (step, flow, repa, dur)
  std::vector<std::pair<int, EvalMetricsRow>> evals;
};

inline ParamList<float> tts_named_tensors(const TTSModel<float>& model,
                                          const LatentStats& stats) {
  ParamList<float> out = model.ps.list();
  out.push_back({"latent_stats.mean",
                 Tensor<float>::from(std::vector<float>(stats.mean),
                                     {int64_t(stats.mean.size())})});
  out.push_back({"latent_stats.std",
                 Tensor<float>::from(std::vector<float>(stats.std),
                                     {int64_t(stats.std.size())})});
  return out;
}

// Requires a trained (frozen) style encoder; writes metrics.csv and
// checkpoints under run_dir when non-empty.
inline TrainHistory train_loop(const World& world, const TTSModel<float>& model,
                               const StyleEncoder<float>& style_enc,
                               const TrainDataset& dataset,
                               const LatentStats& stats, const TrainConfig& cfg,
                               const std::string& run_dir = "",
                               const EvalCallback& eval_cb = nullptr) {
  Adam<float> opt(model.ps.list(), {.lr = cfg.lr});
  Rng rng(cfg.seed);

  std::ofstream csv;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    csv.open(run_dir + "/metrics.csv", std::ios::trunc);
    csv << kMetricsHeader << "\n";
  }

  TrainHistory hist;
  auto run_eval = [&](int step) {
    if (!eval_cb) return;
    EvalMetricsRow row = eval_cb(step);
    hist.evals.emplace_back(step, row);
    if (csv.is_open())
      csv << step << ",,,," << row.emotion_acc << "," << row.energy_acc << ","
          << row.rate_acc << "," << row.speaker_acc << "," << row.content_error
          << "\n";
  };

  for (int step = 0; step < cfg.steps; ++step) {
    opt.set_lr(warmup_lr(cfg.lr, step, cfg.steps, cfg.warmup_frac));

    std::vector<SamplePlan<float>> plans;
    plans.reserve(size_t(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i)
      plans.push_back(make_sample_plan<float>(dataset, cfg.dropout, stats, rng));

    Tape<float> tape;
    auto losses = batch_objective(world, model, style_enc, stats, plans,
                                  cfg.weights);
    float total = losses.total.item();
    if (!std::isfinite(total))
      fail("train_loop: non-finite loss at step " + std::to_string(step));
    tape.backward(losses.total);
    opt.step();
    opt.zero_grad();

    if (step % 50 == 0 || step + 1 == cfg.steps) {
      hist.losses.push_back({float(step), losses.flow.item(),
                             losses.repa.item(), losses.dur.item()});
      if (csv.is_open())
        csv << step << "," << losses.flow.item() << "," << losses.repa.item()
            << "," << losses.dur.item() << ",,,,,\n";
    }
    if (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0)
      run_eval(step + 1);
    if (!run_dir.empty() && cfg.checkpoint_interval > 0 &&
        (step + 1) % cfg.checkpoint_interval == 0)
      save_checkpoint(run_dir + "/tts_step" + std::to_string(step + 1) + ".ckpt",
                      tts_named_tensors(model, stats),
                      Json{{"config", tts_model_config_json(model.cfg)},
                           {"step", step + 1}});
  }
  if (cfg.eval_interval > 0 &&
      (hist.evals.empty() || hist.evals.back().first != cfg.steps))
    run_eval(cfg.steps);
  if (!run_dir.empty())
    save_checkpoint(run_dir + "/tts.ckpt", tts_named_tensors(model, stats),
                    Json{{"config", tts_model_config_json(model.cfg)},
                         {"step", cfg.steps}});
  return hist;
}

}  // namespace flowtts
