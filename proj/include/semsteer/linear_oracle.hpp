#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "semsteer/nn.hpp"

namespace semsteer {

/// First-order scorer S(a | o, l) = W_v phi + W_l psi + W_x (phi * psi).
/// Rows index actions. The interaction term vanishes under the null condition
/// (psi = 0) and is zero by default.
struct LinearScorer {
  nn::Tensor w_visual;       // actions x d
  nn::Tensor w_language;     // actions x d
  nn::Tensor w_interaction;  // actions x d

  LinearScorer() = default;
  LinearScorer(nn::Tensor wv, nn::Tensor wl);
  LinearScorer(nn::Tensor wv, nn::Tensor wl, nn::Tensor wx);

  int actions() const { return w_visual.rows(); }
  int width() const { return w_visual.cols(); }
  bool has_interaction() const;
};

/// nullopt psi is the null condition (psi = 0 exactly).
std::vector<double> linear_score(const LinearScorer& s, std::span<const double> phi,
                                 std::optional<std::span<const double>> psi);

/// Matrix-vector products exposed for the closed-form side of the checks.
std::vector<double> visual_term(const LinearScorer& s, std::span<const double> phi);
std::vector<double> language_term(const LinearScorer& s, std::span<const double> psi);

struct DecouplingReport {
  double residual_error = 0.0;  // max |residual - W_l psi|
  double steered_error = 0.0;   // max |steered - (W_v phi + gamma W_l psi)|
};

/// Routes through the steering module. Requires a zero interaction term.
DecouplingReport verify_decoupling(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi,
                                   double gamma);

struct SnrReport {
  /// Per action; nullopt where |W_v phi| = 0.
  std::vector<std::optional<double>> snr_std;
  std::vector<std::optional<double>> snr_steered;
  std::vector<int> undefined_actions;
  /// max |snr_steered - gamma * snr_std| over defined actions.
  double scaling_error = 0.0;
};

/// |W_l psi| / |W_v phi| per action, plain and with the language term scaled
/// by gamma (taken from the steered-minus-unconditional logits).
SnrReport snr(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi, double gamma);

/// Smallest gamma at which the steered logit of action_lang passes that of
/// action_visual: m_v / m_l, or nullopt when m_l <= 0.
std::optional<double> critical_gamma(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi,
                                     int action_visual, int action_lang);

/// Argmax of the steered linear logits (lowest index on ties).
int steered_argmax(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi, double gamma);

struct LinearInstance {
  LinearScorer scorer;
  std::vector<double> phi;
  std::vector<double> psi;
  int action_visual = 0;  // argmax of W_v phi
  int action_lang = 0;    // argmax of W_l psi, distinct from action_visual
};

/// Random instance with ||W_v||_F / ||W_l||_F = dominance. Actions other than
/// the two contenders are pushed below both on each term, so for every
/// gamma >= 0 the steered argmax is one of the two.
LinearInstance make_dominated_instance(std::uint64_t seed, int actions, int d, double dominance);

double frobenius(const nn::Tensor& t);

struct OracleOptions {
  std::uint64_t seed = 0;
  int decoupling_instances = 1000;
  int flip_instances = 100;
  int actions = 7;
  int d = 8;
  double dominance = 10.0;
  double tolerance = 1e-12;
  double flip_margin = 0.01;
};

/// Runs decoupling, SNR scaling, argmax-flip and residual-cancellation checks
/// and returns a JSON report with a pass flag per check.
nlohmann::json run_oracle_checks(const OracleOptions& opt);

}  // namespace semsteer
