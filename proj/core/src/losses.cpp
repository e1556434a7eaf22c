#include "frace/losses.hpp"

#include <sstream>
#include <string>

#include "frace/errors.hpp"

namespace frace {

void LossWeights::validate() const {
  for (double w : {lambda_adv, lambda_cls, lambda_rec, lambda_exp, lambda_per}) {
    if (!(w >= 0.0)) throw ValidationError("loss weights must be non-negative");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_adv", w.lambda_adv}, {"lambda_cls", w.lambda_cls},
                     {"lambda_rec", w.lambda_rec}, {"lambda_exp", w.lambda_exp},
                     {"lambda_per", w.lambda_per}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda_adv = j.value("lambda_adv", 1.0);
  w.lambda_cls = j.value("lambda_cls", 1.0);
  w.lambda_rec = j.value("lambda_rec", 1.0);
  w.lambda_exp = j.value("lambda_exp", 1.0);
  w.lambda_per = j.value("lambda_per", 1.0);
  w.validate();
}

namespace {

void require_finite(const torch::Tensor& t, const char* name) {
  if (!torch::isfinite(t.detach()).all().item<bool>()) {
    throw ValidationError(std::string(name) + " contains non-finite values");
  }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream msg;
    msg << what << ": shape " << a.sizes() << " does not match " << b.sizes();
    throw ShapeError(msg.str());
  }
}

torch::Tensor safe_log(const torch::Tensor& p) { return torch::log(torch::clamp_min(p, kLogEpsilon)); }

torch::Tensor nll_of_rows(const torch::Tensor& probs, const torch::Tensor& labels, const char* name) {
  if (probs.dim() != 2) throw ShapeError(std::string(name) + ": probabilities must be [N, C]");
  if (labels.dim() != 1 || labels.size(0) != probs.size(0)) {
    throw ShapeError(std::string(name) + ": need one label per row");
  }
  require_finite(probs, name);
  if (labels.numel() > 0) {
    const auto lo = labels.min().item<std::int64_t>();
    const auto hi = labels.max().item<std::int64_t>();
    if (lo < 0 || hi >= probs.size(1)) {
      throw ValidationError(std::string(name) + ": label outside [0, C)");
    }
  }
  const auto picked = probs.gather(1, labels.to(torch::kInt64).unsqueeze(1)).squeeze(1);
  return -safe_log(picked).mean();
}

}  // namespace

torch::Tensor adversarial_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_finite(d_real, "d_real");
  require_finite(d_fake, "d_fake");
  // Clamping 1 - p (rather than p) keeps float32 inputs near 1 away from log 0.
  return safe_log(d_real).mean() + safe_log(1.0 - d_fake).mean();
}

torch::Tensor domain_cls_loss(const torch::Tensor& domain_probs, const torch::Tensor& labels) {
  return nll_of_rows(domain_probs, labels, "domain_cls_loss");
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& g_forward,
                                  const torch::Tensor& g_backward) {
  require_same_shape(x, g_forward, "reconstruction_loss");
  require_same_shape(x, g_backward, "reconstruction_loss");
  require_finite(g_forward, "g_forward");
  require_finite(g_backward, "g_backward");
  return (g_forward + g_backward).abs().mean();
}

torch::Tensor explanation_loss(const torch::Tensor& classifier_probs,
                               const torch::Tensor& target_labels) {
  return nll_of_rows(classifier_probs, target_labels, "explanation_loss");
}

torch::Tensor perturbation_loss(const torch::Tensor& g_forward, const torch::Tensor& g_backward) {
  require_same_shape(g_forward, g_backward, "perturbation_loss");
  require_finite(g_forward, "g_forward");
  require_finite(g_backward, "g_backward");
  return g_forward.abs().mean() + g_backward.abs().mean();
}

}  // namespace frace
