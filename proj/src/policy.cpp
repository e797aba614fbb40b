#include "radt/policy.hpp"

#include <nlohmann/json.hpp>

namespace radt::policy {

using nlohmann::json;

void TokenSeq::validate() const {
  if (steps < 1) throw std::runtime_error("token seq: empty");
  auto need = [&](std::size_t got, const char* what) {
    if (got != static_cast<std::size_t>(steps))
      throw std::runtime_error(std::string("token seq: misaligned ") + what);
  };
  need(rtg.size(), "rtg");
  need(state.size(), "states");
  need(action.size(), "actions");
  need(reward.size(), "rewards");
  need(target.size(), "targets");
}

TokenSeq make_window(const std::vector<std::array<int, 2>>& states,
                     const std::vector<int>& actions, const std::vector<int>& rewards,
                     const std::vector<int>& rtg, int start, int len) {
  if (start < 0 || len < 1 || start + len > static_cast<int>(states.size()))
    throw std::runtime_error("make_window: window out of range");
  TokenSeq s;
  s.steps = len;
  s.rtg.resize(len);
  s.state.resize(len);
  s.action.resize(len);
  s.reward.resize(len);
  s.target.assign(len, 1);
  for (int t = 0; t < len; ++t) {
    s.rtg[t] = static_cast<float>(rtg[start + t]);
    s.state[t] = {static_cast<float>(states[start + t][0]),
                  static_cast<float>(states[start + t][1])};
    s.action[t] = actions[start + t];
    s.reward[t] = static_cast<float>(rewards[start + t]);
  }
  return s;
}

RawTrajectory detokenize(const TokenSeq& seq) {
  RawTrajectory out;
  const int n = seq.full_steps();
  for (int t = 0; t < n; ++t) {
    out.states.push_back({static_cast<int>(std::lround(seq.state[t][0])),
                          static_cast<int>(std::lround(seq.state[t][1]))});
    out.actions.push_back(seq.action[t]);
    out.rewards.push_back(static_cast<int>(std::lround(seq.reward[t])));
    out.rtg.push_back(static_cast<int>(std::lround(seq.rtg[t])));
  }
  return out;
}

std::string PolicyConfig::to_json() const {
  json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["dim"] = dim;
  j["context_steps"] = context_steps;
  j["cross_attention"] = cross_attention;
  j["ca_every"] = ca_every;
  j["dropout"] = dropout;
  j["n_actions"] = n_actions;
  j["include_rtg"] = include_rtg;
  j["max_timesteps"] = max_timesteps;
  j["max_ctx_steps"] = max_ctx_steps;
  j["state_scale"] = state_scale;
  j["rtg_scale"] = rtg_scale;
  return j.dump();
}

PolicyConfig PolicyConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  PolicyConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.dim = j.value("dim", c.dim);
  c.context_steps = j.value("context_steps", c.context_steps);
  c.cross_attention = j.value("cross_attention", c.cross_attention);
  c.ca_every = j.value("ca_every", c.ca_every);
  c.dropout = j.value("dropout", c.dropout);
  c.n_actions = j.value("n_actions", c.n_actions);
  c.include_rtg = j.value("include_rtg", c.include_rtg);
  c.max_timesteps = j.value("max_timesteps", c.max_timesteps);
  c.max_ctx_steps = j.value("max_ctx_steps", c.max_ctx_steps);
  c.state_scale = j.value("state_scale", c.state_scale);
  c.rtg_scale = j.value("rtg_scale", c.rtg_scale);
  c.finalize();
  return c;
}

DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "sample") return DecodeMode::sample;
  if (s == "argmax") return DecodeMode::argmax;
  throw std::runtime_error("unknown decode mode: " + s);
}

std::string to_string(DecodeMode m) {
  return m == DecodeMode::sample ? "sample" : "argmax";
}

int select_action(std::span<const float> logits, Rng& rng, DecodeMode mode,
                  double temperature) {
  const int n = static_cast<int>(logits.size());
  if (n == 0) throw std::runtime_error("select_action: empty logits");
  if (mode == DecodeMode::argmax) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (logits[i] > logits[best]) best = i;
    return best;
  }
  std::vector<double> p(n);
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double sum = 0.0;
  const double inv_t = 1.0 / std::max(temperature, 1e-8);
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp((logits[i] - mx) * inv_t);
    sum += p[i];
  }
  double u = rng.uniform() * sum;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return n - 1;
}

double sample_target_return(envs::TaskKind kind, int width, int height,
                            const std::optional<std::pair<double, double>>& override_ms,
                            Rng& rng) {
  (void)kind;  // the published distributions cover both grid-world variants
  double mean, stddev;
  if (override_ms) {
    mean = override_ms->first;
    stddev = override_ms->second;
  } else if (width == 10 && height == 10) {
    mean = 90, stddev = 5;
  } else if (width == 20 && height == 20) {
    mean = 370, stddev = 10;
  } else if (width == 40 && height == 20) {
    mean = 500, stddev = 10;
  } else {
    throw std::runtime_error(
        "sample_target_return: no published distribution for this grid size; "
        "set an explicit target_return in the config");
  }
  return rng.normal(mean, stddev);
}

std::pair<int, int> ad_build_pair(int n_episodes, int k, Rng& rng) {
  if (k < 1) throw std::runtime_error("ad_build_pair: K must be >= 1");
  if (n_episodes < k + 1)
    throw std::runtime_error("ad_build_pair: stream too short for K=" + std::to_string(k));
  int i = static_cast<int>(rng.uniform_int(static_cast<u64>(n_episodes - k)));
  return {i, i + k};
}

}  // namespace radt::policy
