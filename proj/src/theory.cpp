#include "treegrpo/theory.hpp"

#include <cmath>
#include <ostream>

#include "json.hpp"

namespace treegrpo {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double total_logprob(const PolicyParams& params, const FeatureEncoder& encoder,
                     const StepContext& ctx, std::span<const int> ids) {
  return logprob(params, encoder, ctx, ids).first;
}

std::vector<double> grad_difference(const PolicyParams& params,
                                    const FeatureEncoder& encoder,
                                    const BinaryNode& node) {
  std::vector<double> g_win =
      grad_logprob(params, encoder, node.context, node.win);
  const std::vector<double> g_loss =
      grad_logprob(params, encoder, node.context, node.loss);
  for (std::size_t i = 0; i < g_win.size(); ++i) g_win[i] -= g_loss[i];
  return g_win;
}

}  // namespace

std::pair<double, double> binary_probs(const PolicyParams& params,
                                       const FeatureEncoder& encoder,
                                       const BinaryNode& node) {
  const double delta = total_logprob(params, encoder, node.context, node.win) -
                       total_logprob(params, encoder, node.context, node.loss);
  // sigmoid(-delta) rather than 1 - sigmoid(delta): the subtraction loses
  // the loss probability entirely once the preference saturates.
  return {sigmoid(delta), sigmoid(-delta)};
}

std::vector<double> dpo_gradient(const PolicyParams& params,
                                 const FeatureEncoder& encoder,
                                 const BinaryNode& node, double beta) {
  const double delta = total_logprob(params, encoder, node.context, node.win) -
                       total_logprob(params, encoder, node.context, node.loss);
  const double weight = sigmoid(-beta * delta);
  std::vector<double> grad = grad_difference(params, encoder, node);
  for (double& g : grad) g *= weight;
  return grad;
}

std::vector<double> intra_gradient_closed_form(const PolicyParams& params,
                                               const FeatureEncoder& encoder,
                                               const BinaryNode& node) {
  const auto [p_win, p_loss] = binary_probs(params, encoder, node);
  std::vector<double> grad = grad_difference(params, encoder, node);
  for (double& g : grad) g *= p_win * p_loss;
  return grad;
}

std::vector<double> intra_gradient_sampled(const PolicyParams& params,
                                           const FeatureEncoder& encoder,
                                           const BinaryNode& node,
                                           int n_samples, RngStream& rng) {
  if (n_samples < 1) {
    throw std::invalid_argument("intra_gradient_sampled: n_samples must be >= 1");
  }
  const auto [p_win, p_loss] = binary_probs(params, encoder, node);
  const std::vector<double> g_win =
      grad_logprob(params, encoder, node.context, node.win);
  const std::vector<double> g_loss =
      grad_logprob(params, encoder, node.context, node.loss);

  std::vector<double> estimate(g_win.size(), 0.0);
  for (int s = 0; s < n_samples; ++s) {
    if (rng.next_double() < p_win) {
      // Advantage of a sampled win is the loss probability.
      for (std::size_t i = 0; i < estimate.size(); ++i) {
        estimate[i] += p_loss * g_win[i];
      }
    } else {
      for (std::size_t i = 0; i < estimate.size(); ++i) {
        estimate[i] -= p_win * g_loss[i];
      }
    }
  }
  for (double& e : estimate) e /= static_cast<double>(n_samples);
  return estimate;
}

EquivalenceCase check_equivalence(const PolicyParams& params,
                                  const FeatureEncoder& encoder,
                                  const BinaryNode& node, std::string case_id,
                                  double cosine_tol, double ratio_tol) {
  EquivalenceCase result;
  result.case_id = std::move(case_id);
  const auto [p_win, p_loss] = binary_probs(params, encoder, node);
  result.p_win = p_win;

  const std::vector<double> dpo = dpo_gradient(params, encoder, node, 1.0);
  const std::vector<double> intra =
      intra_gradient_closed_form(params, encoder, node);

  double dot = 0.0;
  double n_dpo = 0.0;
  double n_intra = 0.0;
  for (std::size_t i = 0; i < dpo.size(); ++i) {
    dot += dpo[i] * intra[i];
    n_dpo += dpo[i] * dpo[i];
    n_intra += intra[i] * intra[i];
  }
  n_dpo = std::sqrt(n_dpo);
  n_intra = std::sqrt(n_intra);
  if (n_dpo == 0.0 || n_intra == 0.0) {
    // Both vanish together (g_win == g_loss or a saturated probability).
    result.cosine = (n_dpo == 0.0 && n_intra == 0.0) ? 1.0 : 0.0;
    result.weight_ratio = p_win;
    result.pass = n_dpo == 0.0 && n_intra == 0.0;
    return result;
  }
  result.cosine = dot / (n_dpo * n_intra);
  result.weight_ratio = n_intra / n_dpo;
  result.pass = std::abs(result.cosine - 1.0) <= cosine_tol &&
                std::abs(result.weight_ratio - p_win) <= ratio_tol;
  return result;
}

void write_equivalence_report(std::ostream& out,
                              std::span<const EquivalenceCase> cases) {
  for (const EquivalenceCase& c : cases) {
    nlohmann::json rec;
    rec["case_id"] = c.case_id;
    rec["p_win"] = c.p_win;
    rec["cosine"] = c.cosine;
    rec["weight_ratio"] = c.weight_ratio;
    rec["pass"] = c.pass;
    out << rec.dump() << '\n';
  }
}

}  // namespace treegrpo
