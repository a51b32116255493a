#pragma once

#include "adaseg/tensor.hpp"

namespace adaseg {

// Soft Dice loss on probabilities in [0,1] against a one-hot target:
// per (instance, foreground class) 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps),
// averaged over classes (background channel 0 excluded) and batch.
real dice_loss(const Tensor& probs, const Tensor& target, real eps);
Tensor dice_loss_grad(const Tensor& probs, const Tensor& target, real eps);

// Mean binary cross-entropy on logits, one-vs-rest per channel, computed with
// the numerically stable max(z,0) - z*t + log1p(exp(-|z|)) form.
real bce_loss(const Tensor& logits, const Tensor& target);
Tensor bce_loss_grad(const Tensor& logits, const Tensor& target);

// Softmax cross-entropy alternative to the per-channel BCE term.
real softmax_ce_loss(const Tensor& logits, const Tensor& target);
Tensor softmax_ce_loss_grad(const Tensor& logits, const Tensor& target);

enum class BceMode { Sigmoid, SoftmaxCE };

// lambda * bce(logits, target) + dice(sigmoid(logits), target).
real combined_loss(const Tensor& logits, const Tensor& target, real lambda, real eps_dice,
                   BceMode mode = BceMode::Sigmoid);
Tensor combined_loss_grad(const Tensor& logits, const Tensor& target, real lambda, real eps_dice,
                          BceMode mode = BceMode::Sigmoid);

// lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * step / total_steps))
real cosine_lr(long step, long total_steps, real lr_max, real lr_min);

// Mean squared reconstruction error (DPG pretraining objective).
real mse_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss_grad(const Tensor& pred, const Tensor& target);

// (B, *spatial) integer mask -> (B, K, *spatial) one-hot planes.
Tensor one_hot(const ByteTensor& mask, long num_classes);

Tensor sigmoid(const Tensor& logits);
Tensor softmax_channels(const Tensor& logits);

}  // namespace adaseg
