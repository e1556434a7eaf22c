#pragma once

#include <utility>

#include <torch/torch.h>

#include "json.hpp"

namespace frace {

/// Lower bound applied inside every log.
inline constexpr double kLogEpsilon = 1e-8;

struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_cls = 1.0;
  double lambda_rec = 1.0;
  double lambda_exp = 1.0;
  double lambda_per = 1.0;

  /// Throws ValidationError on a negative weight.
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// All losses below reduce by the mean over batch and elements and return a
// 0-dim tensor of the input dtype, differentiable w.r.t. their inputs.
// Non-finite inputs raise ValidationError, mismatched shapes ShapeError.

/// mean log D(x) + mean log(1 - D(x + G(x, y^c))).
torch::Tensor adversarial_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// mean -log p[label] over rows of a [N, C] probability tensor. Used for
/// the discriminator's domain head on real (true labels) and fake (target
/// labels) images.
torch::Tensor domain_cls_loss(const torch::Tensor& domain_probs, const torch::Tensor& labels);

/// Cycle loss. x - (x + g_f + g_b) cancels to -(g_f + g_b), so the value is
/// mean |g_forward + g_backward|; x only fixes the expected shape.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& g_forward,
                                  const torch::Tensor& g_backward);

/// mean -log H(y^c | x + G(x, y^c)) from the frozen classifier's rows.
torch::Tensor explanation_loss(const torch::Tensor& classifier_probs,
                               const torch::Tensor& target_labels);

/// mean |g_forward| + mean |g_backward|.
torch::Tensor perturbation_loss(const torch::Tensor& g_forward, const torch::Tensor& g_backward);

template <typename T>
struct LossTerms {
  T adv;
  T cls_real;
  T cls_fake;
  T rec;
  T exp;
  T per;
};

template <typename T>
struct TotalLosses {
  T discriminator;
  T generator;
};

/// L_D = -l_adv L_adv + l_cls L^r_cls
/// L_G =  l_adv L_adv + l_cls L^f_cls + l_rec L_rec + l_exp L_exp + l_per L_per
template <typename T>
TotalLosses<T> total_losses(const LossTerms<T>& t, const LossWeights& w) {
  T d = -w.lambda_adv * t.adv + w.lambda_cls * t.cls_real;
  T g = w.lambda_adv * t.adv + w.lambda_cls * t.cls_fake + w.lambda_rec * t.rec +
        w.lambda_exp * t.exp + w.lambda_per * t.per;
  return {std::move(d), std::move(g)};
}

}  // namespace frace
