#pragma once

// Run configuration: one nested JSON document with documented defaults,
// strict unknown-key rejection, and dotted-path command-line overrides.

#include <string>
#include <vector>

#include "flowtts/evalkit.hpp"
#include "flowtts/sampler.hpp"
#include "flowtts/style_encoder.hpp"
#include "flowtts/training.hpp"
#include "flowtts/tts_model.hpp"
#include "flowtts/world.hpp"

namespace flowtts {

struct ProbeTrainConfig {
  uint64_t seed = 51;
  int train = 2500;
  int heldout = 600;
};

struct EvalConfig {
  uint64_t seed = 41;
  int pairs = 90;
  int pool = 450;  // held-out utterances the pair builder draws from
  std::vector<float> grid = {1.0f, 2.0f, 4.0f, 6.0f, 8.0f};
  int sweep_pairs = 45;
};

struct AblateConfig {
  std::vector<uint64_t> seeds = {1, 2, 3};
  int tts_steps = 4000;
  int eval_pairs = 90;
};

struct RunConfig {
  WorldConfig world;
  ProbeTrainConfig probes;
  StyleEncoderConfig style;
  TTSModelConfig tts_model;
  TrainConfig tts_train;
  SamplerConfig sampler;
  GuidanceScales scales;
  EvalConfig eval;
  AblateConfig ablate;
};

inline Json run_config_json(const RunConfig& c) {
  Json j;
  j["world"] = world_config_json(c.world);
  j["probes"] = Json{{"seed", c.probes.seed},
                     {"train", c.probes.train},
                     {"heldout", c.probes.heldout}};
  j["style"] = style_config_json(c.style);
  j["tts_model"] = tts_model_config_json(c.tts_model);
  j["tts_train"] = train_config_json(c.tts_train);
  j["sampler"] = Json{{"steps", c.sampler.steps}, {"seed", c.sampler.seed}};
  j["scales"] = Json{{"text", c.scales.text},
                     {"spk", c.scales.spk},
                     {"style", c.scales.style}};
  j["eval"] = Json{{"seed", c.eval.seed},
                   {"pairs", c.eval.pairs},
                   {"pool", c.eval.pool},
                   {"grid", c.eval.grid},
                   {"sweep_pairs", c.eval.sweep_pairs}};
  j["ablate"] = Json{{"seeds", c.ablate.seeds},
                     {"tts_steps", c.ablate.tts_steps},
                     {"eval_pairs", c.ablate.eval_pairs}};
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  c.world = world_config_from_json(j.at("world"));
  c.probes.seed = j.at("probes").at("seed").get<uint64_t>();
  c.probes.train = j.at("probes").at("train").get<int>();
  c.probes.heldout = j.at("probes").at("heldout").get<int>();
  c.style = style_config_from_json(j.at("style"));
  c.tts_model = tts_model_config_from_json(j.at("tts_model"));
  c.tts_train = train_config_from_json(j.at("tts_train"));
  c.sampler.steps = j.at("sampler").at("steps").get<int>();
  c.sampler.seed = j.at("sampler").at("seed").get<uint64_t>();
  c.scales.text = j.at("scales").at("text").get<float>();
  c.scales.spk = j.at("scales").at("spk").get<float>();
  c.scales.style = j.at("scales").at("style").get<float>();
  c.eval.seed = j.at("eval").at("seed").get<uint64_t>();
  c.eval.pairs = j.at("eval").at("pairs").get<int>();
  c.eval.pool = j.at("eval").at("pool").get<int>();
  c.eval.grid = j.at("eval").at("grid").get<std::vector<float>>();
  c.eval.sweep_pairs = j.at("eval").at("sweep_pairs").get<int>();
  c.ablate.seeds = j.at("ablate").at("seeds").get<std::vector<uint64_t>>();
  c.ablate.tts_steps = j.at("ablate").at("tts_steps").get<int>();
  c.ablate.eval_pairs = j.at("ablate").at("eval_pairs").get<int>();
  return c;
}

// Overlay user JSON onto the defaults, rejecting any key the defaults do not
// know. Arrays and scalars replace wholesale; objects merge recursively.
inline Json merge_config_strict(const Json& defaults, const Json& user,
                                const std::string& path = "") {
  if (!user.is_object()) {
    if (defaults.is_object())
      fail("config: expected an object at '" + (path.empty() ? "." : path) + "'");
    return user;
  }
  Json out = defaults;
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key()))
      fail("config: unknown key '" + key_path + "'");
    if (defaults.at(it.key()).is_object())
      out[it.key()] = merge_config_strict(defaults.at(it.key()), it.value(), key_path);
    else
      out[it.key()] = it.value();
  }
  return out;
}

// --key.path=value override; the value is parsed as JSON, falling back to a
// plain string.
inline void apply_override(Json& config, const std::string& dotted,
                           const std::string& value) {
  std::vector<std::string> parts;
  size_t pos = 0;
  while (pos != std::string::npos) {
    size_t dot = dotted.find('.', pos);
    parts.push_back(dotted.substr(pos, dot == std::string::npos ? dot : dot - pos));
    pos = dot == std::string::npos ? dot : dot + 1;
  }
  Json* node = &config;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      fail("config: unknown key '" + dotted + "'");
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->contains(leaf) || (*node)[leaf].is_object())
    fail("config: unknown key '" + dotted + "'");
  Json parsed = Json::parse(value, nullptr, false);
  (*node)[leaf] = parsed.is_discarded() ? Json(value) : parsed;
}

}  // namespace flowtts
