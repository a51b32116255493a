#pragma once

#include <string>

#include "adaseg/tensor.hpp"

namespace adaseg {

// How normalization statistics of the feature batch are pooled.
//   Batch:    over batch + spatial axes (training).
//   Instance: per instance over spatial axes only (episodic test, batch of one).
//   Running:  frozen stats supplied by the caller (plain-BN evaluation).
enum class StatsMode { Batch, Instance, Running };

std::string stats_mode_name(StatsMode m);

// Per-channel first/second moments. std is already floored (always > 0).
struct ChannelStats {
    Tensor mean;  // (C)
    Tensor std;   // (C)
};

// Bottleneck feature map emitted by the frozen DPG encoder for one instance.
struct DomainCode {
    Tensor values;  // (code_channels, *spatial_code)
    std::string source_fingerprint;

    long code_channels() const { return values.ndim() > 0 ? values.dim(0) : 0; }
};

// Learnable state of one adaptive batch-normalization layer: affine scale and
// shift plus a pointwise linear projection of the domain code into this
// layer's channel count.
struct AdaBNState {
    Tensor gamma;            // (C)
    Tensor beta;             // (C)
    Tensor code_projection;  // (C, code_channels)
    real epsilon = 1e-5;
};

// z = gamma * (X - mu(X)) / sigma(X) + beta, per channel.
// sigma uses the biased variance estimator and is computed as sqrt(var + eps).
Tensor batch_norm(const Tensor& X, const Tensor& gamma, const Tensor& beta, real eps,
                  StatsMode stats_mode, const ChannelStats* running = nullptr);

// z = sigma(y) * (x - mu(x)) / sigma(x) + mu(y); per-channel statistics over
// spatial axes per instance.
Tensor ada_in(const Tensor& x, const Tensor& y, real eps = 0.0);

// Projects the code to C channels pointwise, then returns per-channel mean
// and epsilon-floored std (std = max(sqrt(var), eps)) over the spatial grid.
ChannelStats code_stats(const DomainCode& code, const AdaBNState& state);

// z = gamma * ( sigma(Y) * (X - mu(X)) / sigma(X) + mu(Y) ) + beta.
// The single code is broadcast across the batch. stats_mode must be Batch or
// Instance.
Tensor ada_bn_forward(const Tensor& X, const DomainCode& code, const AdaBNState& state,
                      StatsMode stats_mode);

}  // namespace adaseg
