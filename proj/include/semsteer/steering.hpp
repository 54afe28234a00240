#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "semsteer/policy.hpp"

namespace semsteer {

enum class DecodeHead { Discrete, Flow };
std::string_view to_string(DecodeHead h);
DecodeHead decode_head_from_string(std::string_view s);

struct SteeringConfig {
  /// Steering coefficient; 1 reproduces the plain conditional policy.
  double gamma = 1.0;
  DecodeHead head = DecodeHead::Discrete;
  int denoise_steps = 10;
  std::uint64_t seed = 0;
  /// When false the decoder runs the conditional pass only (no null pass).
  bool guided = true;

  void validate() const;
};

/// Delta_sem = s_cond - s_uncond, elementwise.
std::vector<double> residual(std::span<const double> s_cond, std::span<const double> s_uncond);

/// s_uncond + gamma * delta. Throws std::domain_error on a non-finite result.
std::vector<double> steer_logits(std::span<const double> s_uncond, std::span<const double> delta, double gamma);

/// Index of the largest entry, lowest index on ties.
int argmax(std::span<const double> v);

struct SteeredDistribution {
  std::vector<double> probs;
};

struct DiscreteDecision {
  std::vector<double> logits;
  SteeredDistribution distribution;
  PrimitiveKind action = PrimitiveKind::Noop;
};

/// Conditional and null passes, residual, steering, softmax, argmax.
DiscreteDecision decode_discrete(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                                 const SteeringConfig& cfg);

/// Euler integration of v_null + gamma * (v_cond - v_null) from seeded noise
/// over denoise_steps uniform steps on [0, 1]; the result is clamped to [-1, 1].
ActionChunk decode_flow(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                        const SteeringConfig& cfg);

/// steer(gamma) - steer(1); equals (gamma - 1) * residual.
std::vector<double> steering_gap(const ConditionalScorer& scorer, const Scene& scene, const Condition& condition,
                                 double gamma);

}  // namespace semsteer
