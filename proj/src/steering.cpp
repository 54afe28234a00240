#include "semsteer/steering.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "semsteer/rng.hpp"

namespace semsteer {

std::string_view to_string(DecodeHead h) { return h == DecodeHead::Discrete ? "discrete" : "flow"; }

DecodeHead decode_head_from_string(std::string_view s) {
  if (s == "discrete") return DecodeHead::Discrete;
  if (s == "flow") return DecodeHead::Flow;
  throw std::invalid_argument("unknown head '" + std::string(s) + "' (expected discrete or flow)");
}

void SteeringConfig::validate() const {
  if (!std::isfinite(gamma) || gamma < 0.0) throw std::invalid_argument("steering: gamma must be finite and >= 0");
  if (denoise_steps < 1) throw std::invalid_argument("steering: denoise_steps must be >= 1");
}

std::vector<double> residual(std::span<const double> s_cond, std::span<const double> s_uncond) {
  if (s_cond.size() != s_uncond.size()) {
    throw std::invalid_argument("residual: length mismatch (" + std::to_string(s_cond.size()) + " vs " +
                                std::to_string(s_uncond.size()) + ")");
  }
  std::vector<double> out(s_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s_cond[i] - s_uncond[i];
  return out;
}

std::vector<double> steer_logits(std::span<const double> s_uncond, std::span<const double> delta, double gamma) {
  if (s_uncond.size() != delta.size()) throw std::invalid_argument("steer_logits: length mismatch");
  std::vector<double> out(s_uncond.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = s_uncond[i] + gamma * delta[i];
    if (!std::isfinite(out[i])) throw std::domain_error("steer_logits: non-finite steered logit");
  }
  return out;
}

int argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty vector");
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

DiscreteDecision decode_discrete(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                                 const SteeringConfig& cfg) {
  cfg.validate();
  DiscreteDecision out;
  const auto s_cond = scorer.score(scene, condition);
  if (cfg.guided) {
    const auto s_uncond = scorer.score(scene, kNullCondition);
    out.logits = steer_logits(s_uncond, residual(s_cond, s_uncond), cfg.gamma);
  } else {
    out.logits = s_cond;
  }
  out.distribution.probs = nn::softmax(out.logits);
  out.action = static_cast<PrimitiveKind>(argmax(out.logits));
  return out;
}

ActionChunk decode_flow(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                        const SteeringConfig& cfg) {
  cfg.validate();
  const int width = scorer.chunk_width();
  Rng rng(cfg.seed);
  std::vector<double> x(static_cast<std::size_t>(width));
  for (auto& v : x) v = rng.normal();
  const double dt = 1.0 / cfg.denoise_steps;
  for (int i = 0; i < cfg.denoise_steps; ++i) {
    const double tau = i * dt;
    const auto v_cond = scorer.flow_velocity(scene, condition, x, tau);
    std::vector<double> v = v_cond;
    if (cfg.guided) {
      const auto v_null = scorer.flow_velocity(scene, kNullCondition, x, tau);
      v = steer_logits(v_null, residual(v_cond, v_null), cfg.gamma);
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
      x[j] += dt * v[j];
      if (!std::isfinite(x[j])) {
        throw std::domain_error("decode_flow: non-finite state at step " + std::to_string(i));
      }
    }
  }
  ActionChunk chunk = ActionChunk::unflatten(x);
  chunk.clamp();
  return chunk;
}

std::vector<double> steering_gap(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                                 double gamma) {
  const auto s_cond = scorer.score(scene, condition);
  const auto s_uncond = scorer.score(scene, kNullCondition);
  const auto delta = residual(s_cond, s_uncond);
  const auto steered = steer_logits(s_uncond, delta, gamma);
  const auto unit = steer_logits(s_uncond, delta, 1.0);
  return residual(steered, unit);
}

}  // namespace semsteer
