#include "semsteer/linear_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "semsteer/rng.hpp"
#include "semsteer/steering.hpp"

namespace semsteer {

LinearScorer::LinearScorer(nn::Tensor wv, nn::Tensor wl)
    : w_visual(std::move(wv)), w_language(std::move(wl)), w_interaction(w_visual.shape) {
  if (w_visual.shape != w_language.shape) throw nn::ShapeError("linear scorer: W_v and W_l shapes differ");
}

LinearScorer::LinearScorer(nn::Tensor wv, nn::Tensor wl, nn::Tensor wx)
    : w_visual(std::move(wv)), w_language(std::move(wl)), w_interaction(std::move(wx)) {
  if (w_visual.shape != w_language.shape || w_visual.shape != w_interaction.shape) {
    throw nn::ShapeError("linear scorer: weight shapes differ");
  }
}

bool LinearScorer::has_interaction() const {
  return std::any_of(w_interaction.data.begin(), w_interaction.data.end(), [](double x) { return x != 0.0; });
}

namespace {

std::vector<double> matvec(const nn::Tensor& w, std::span<const double> x) {
  if (static_cast<int>(x.size()) != w.cols()) {
    throw nn::ShapeError("linear scorer: vector width " + std::to_string(x.size()) + ", expected " +
                         std::to_string(w.cols()));
  }
  std::vector<double> out(static_cast<std::size_t>(w.rows()), 0.0);
  for (int a = 0; a < w.rows(); ++a) {
    const auto row = w.row(a);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += row[i] * x[i];
    out[static_cast<std::size_t>(a)] = acc;
  }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

std::vector<double> visual_term(const LinearScorer& s, std::span<const double> phi) { return matvec(s.w_visual, phi); }
std::vector<double> language_term(const LinearScorer& s, std::span<const double> psi) {
  return matvec(s.w_language, psi);
}

std::vector<double> linear_score(const LinearScorer& s, std::span<const double> phi,
                                 std::optional<std::span<const double>> psi) {
  auto out = matvec(s.w_visual, phi);
  if (!psi) return out;
  const auto lang = matvec(s.w_language, *psi);
  if (psi->size() != phi.size()) throw nn::ShapeError("linear scorer: phi and psi widths differ");
  std::vector<double> prod(phi.size());
  for (std::size_t i = 0; i < phi.size(); ++i) prod[i] = phi[i] * (*psi)[i];
  const auto inter = matvec(s.w_interaction, prod);
  for (std::size_t a = 0; a < out.size(); ++a) out[a] += lang[a] + inter[a];
  return out;
}

DecouplingReport verify_decoupling(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi,
                                   double gamma) {
  if (s.has_interaction()) throw std::invalid_argument("verify_decoupling: interaction term must be zero");
  const auto s_cond = linear_score(s, phi, psi);
  const auto s_uncond = linear_score(s, phi, std::nullopt);
  const auto delta = residual(s_cond, s_uncond);
  const auto steered = steer_logits(s_uncond, delta, gamma);

  const auto v = visual_term(s, phi);
  const auto l = language_term(s, psi);
  std::vector<double> expected(v.size());
  for (std::size_t a = 0; a < v.size(); ++a) expected[a] = v[a] + gamma * l[a];
  return {max_abs_diff(delta, l), max_abs_diff(steered, expected)};
}

SnrReport snr(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi, double gamma) {
  const auto v = visual_term(s, phi);
  const auto l = language_term(s, psi);
  const auto s_uncond = linear_score(s, phi, std::nullopt);
  const auto steered = steer_logits(s_uncond, residual(linear_score(s, phi, psi), s_uncond), gamma);
  SnrReport r;
  for (std::size_t a = 0; a < v.size(); ++a) {
    if (v[a] == 0.0) {
      r.snr_std.push_back(std::nullopt);
      r.snr_steered.push_back(std::nullopt);
      r.undefined_actions.push_back(static_cast<int>(a));
      continue;
    }
    const double base = std::abs(l[a]) / std::abs(v[a]);
    // Language contribution of the steered logits, isolated against the null pass.
    const double steered_lang = std::abs(steered[a] - s_uncond[a]) / std::abs(v[a]);
    r.snr_std.push_back(base);
    r.snr_steered.push_back(steered_lang);
    r.scaling_error = std::max(r.scaling_error, std::abs(steered_lang - gamma * base));
  }
  return r;
}

std::optional<double> critical_gamma(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi,
                                     int action_visual, int action_lang) {
  if (action_visual == action_lang) throw std::invalid_argument("critical_gamma: actions must differ");
  const auto v = visual_term(s, phi);
  const auto l = language_term(s, psi);
  const auto av = static_cast<std::size_t>(action_visual);
  const auto al = static_cast<std::size_t>(action_lang);
  const double m_v = v[av] - v[al];
  const double m_l = l[al] - l[av];
  if (m_l <= 0.0) return std::nullopt;
  return m_v / m_l;
}

int steered_argmax(const LinearScorer& s, std::span<const double> phi, std::span<const double> psi, double gamma) {
  const auto s_uncond = linear_score(s, phi, std::nullopt);
  const auto steered = steer_logits(s_uncond, residual(linear_score(s, phi, psi), s_uncond), gamma);
  return argmax(steered);
}

double frobenius(const nn::Tensor& t) {
  double s = 0.0;
  for (double x : t.data) s += x * x;
  return std::sqrt(s);
}

LinearInstance make_dominated_instance(std::uint64_t seed, int actions, int d, double dominance) {
  if (actions < 2 || d < 1) throw std::invalid_argument("make_dominated_instance: need >= 2 actions and d >= 1");
  Rng rng(seed);
  LinearInstance inst;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("make_dominated_instance: could not draw distinct contenders");
    nn::Tensor wv({actions, d}), wl({actions, d});
    for (auto& x : wv.data) x = rng.normal();
    for (auto& x : wl.data) x = rng.normal();
    inst.phi.assign(static_cast<std::size_t>(d), 0.0);
    inst.psi.assign(static_cast<std::size_t>(d), 0.0);
    for (auto& x : inst.phi) x = rng.normal();
    for (auto& x : inst.psi) x = rng.normal();
    const LinearScorer probe(wv, wl);
    const auto v = visual_term(probe, inst.phi);
    const auto l = language_term(probe, inst.psi);
    inst.action_visual = argmax(v);
    inst.action_lang = argmax(l);
    if (inst.action_visual == inst.action_lang) continue;

    // Push the other actions below both contenders on each term by shifting
    // their rows along phi (resp. psi).
    const auto av = static_cast<std::size_t>(inst.action_visual);
    const auto al = static_cast<std::size_t>(inst.action_lang);
    double phi_sq = 0.0, psi_sq = 0.0;
    for (int i = 0; i < d; ++i) {
      phi_sq += inst.phi[static_cast<std::size_t>(i)] * inst.phi[static_cast<std::size_t>(i)];
      psi_sq += inst.psi[static_cast<std::size_t>(i)] * inst.psi[static_cast<std::size_t>(i)];
    }
    const double v_floor = std::min(v[av], v[al]);
    const double l_floor = std::min(l[av], l[al]);
    for (int a = 0; a < actions; ++a) {
      const auto k = static_cast<std::size_t>(a);
      if (k == av || k == al) continue;
      const double v_shift = std::max(0.0, v[k] - v_floor) + 0.5 + rng.uniform();
      const double l_shift = std::max(0.0, l[k] - l_floor) + 0.5 + rng.uniform();
      for (int i = 0; i < d; ++i) {
        wv.at(a, i) -= v_shift * inst.phi[static_cast<std::size_t>(i)] / phi_sq;
        wl.at(a, i) -= l_shift * inst.psi[static_cast<std::size_t>(i)] / psi_sq;
      }
    }
    // Positive rescaling of W_l keeps every ordering and sets the dominance ratio.
    const double scale = frobenius(wv) / (dominance * frobenius(wl));
    for (auto& x : wl.data) x *= scale;
    inst.scorer = LinearScorer(std::move(wv), std::move(wl));
    return inst;
  }
}

nlohmann::json run_oracle_checks(const OracleOptions& opt) {
  nlohmann::json report;
  const std::vector<double> gammas{0.0, 0.5, 1.0, 1.25, 1.5, 2.0, 3.0, 10.0};

  // 1. Decoupling: residual = W_l psi, steered = W_v phi + gamma W_l psi.
  double residual_err = 0.0, steered_err = 0.0, snr_err = 0.0;
  for (int i = 0; i < opt.decoupling_instances; ++i) {
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(i)));
    const double dominance = 1.0 + 19.0 * rng.uniform();
    const auto inst = make_dominated_instance(rng.next_u64(), opt.actions, opt.d, dominance);
    const double gamma = gammas[static_cast<std::size_t>(i) % gammas.size()] + rng.uniform();
    const auto r = verify_decoupling(inst.scorer, inst.phi, inst.psi, gamma);
    residual_err = std::max(residual_err, r.residual_error);
    steered_err = std::max(steered_err, r.steered_error);
    snr_err = std::max(snr_err, snr(inst.scorer, inst.phi, inst.psi, gamma).scaling_error);
  }
  report["decoupling"] = {{"instances", opt.decoupling_instances},
                          {"max_residual_error", residual_err},
                          {"max_steered_error", steered_err},
                          {"tolerance", opt.tolerance},
                          {"pass", residual_err <= opt.tolerance && steered_err <= opt.tolerance}};
  report["snr_scaling"] = {{"instances", opt.decoupling_instances},
                           {"max_scaling_error", snr_err},
                           {"tolerance", opt.tolerance},
                           {"pass", snr_err <= opt.tolerance}};

  // 2. Argmax flip at gamma* on visually dominated instances.
  int flip_ok = 0;
  double min_gamma = 1e300, max_gamma = 0.0;
  for (int i = 0; i < opt.flip_instances; ++i) {
    const auto inst = make_dominated_instance(derive_seed(opt.seed ^ 0xF1F1ULL, static_cast<std::uint64_t>(i)),
                                              opt.actions, opt.d, opt.dominance);
    const auto g = critical_gamma(inst.scorer, inst.phi, inst.psi, inst.action_visual, inst.action_lang);
    if (!g) continue;
    min_gamma = std::min(min_gamma, *g);
    max_gamma = std::max(max_gamma, *g);
    const bool above = steered_argmax(inst.scorer, inst.phi, inst.psi, *g + opt.flip_margin) == inst.action_lang;
    const bool below = *g - opt.flip_margin < 0.0 ||
                       steered_argmax(inst.scorer, inst.phi, inst.psi, *g - opt.flip_margin) == inst.action_visual;
    if (above && below) ++flip_ok;
  }
  report["argmax_flip"] = {{"instances", opt.flip_instances},
                           {"dominance", opt.dominance},
                           {"matches", flip_ok},
                           {"min_critical_gamma", min_gamma},
                           {"max_critical_gamma", max_gamma},
                           {"pass", flip_ok == opt.flip_instances}};

  // 3. Residual cancellation: residual does not depend on phi; a nonzero
  // interaction term breaks this by exactly W_x (phi * psi).
  double cancel_err = 0.0, interaction_dev = 0.0, interaction_model_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(derive_seed(opt.seed ^ 0xCA11ULL, static_cast<std::uint64_t>(i)));
    const auto inst = make_dominated_instance(rng.next_u64(), opt.actions, opt.d, opt.dominance);
    std::vector<double> phi2(inst.phi.size());
    for (auto& x : phi2) x = 3.0 * rng.normal();
    const auto r1 = residual(linear_score(inst.scorer, inst.phi, inst.psi), linear_score(inst.scorer, inst.phi, std::nullopt));
    const auto r2 = residual(linear_score(inst.scorer, phi2, inst.psi), linear_score(inst.scorer, phi2, std::nullopt));
    cancel_err = std::max(cancel_err, max_abs_diff(r1, r2));

    nn::Tensor wx({opt.actions, opt.d});
    for (auto& x : wx.data) x = 0.1 * rng.normal();
    const LinearScorer with_x(inst.scorer.w_visual, inst.scorer.w_language, wx);
    const auto rx = residual(linear_score(with_x, inst.phi, inst.psi), linear_score(with_x, inst.phi, std::nullopt));
    const auto l = language_term(with_x, inst.psi);
    std::vector<double> prod(inst.phi.size());
    for (std::size_t k = 0; k < prod.size(); ++k) prod[k] = inst.phi[k] * inst.psi[k];
    const auto inter = matvec(wx, prod);
    std::vector<double> predicted(l.size());
    for (std::size_t a = 0; a < l.size(); ++a) predicted[a] = l[a] + inter[a];
    interaction_dev = std::max(interaction_dev, max_abs_diff(rx, l));
    interaction_model_err = std::max(interaction_model_err, max_abs_diff(rx, predicted));
  }
  report["residual_cancellation"] = {{"instances", 100},
                                     {"max_phi_dependence", cancel_err},
                                     {"interaction_deviation_from_language_term", interaction_dev},
                                     {"interaction_prediction_error", interaction_model_err},
                                     {"tolerance", opt.tolerance},
                                     {"pass", cancel_err <= opt.tolerance && interaction_model_err <= opt.tolerance}};
  report["pass"] = report["decoupling"]["pass"].get<bool>() && report["snr_scaling"]["pass"].get<bool>() &&
                   report["argmax_flip"]["pass"].get<bool>() && report["residual_cancellation"]["pass"].get<bool>();
  return report;
}

}  // namespace semsteer
