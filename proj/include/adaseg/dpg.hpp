#pragma once

#include <array>

#include "adaseg/layers.hpp"
#include "adaseg/train.hpp"

namespace adaseg {

struct AugSpec {
    std::array<real, 2> gamma_range{1, 1};
    real noise_std = 0;
    std::array<real, 2> blur_sigma_range{0, 0};
    real flip_prob = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static AugSpec from_json(const nlohmann::json& j);
};

struct DPGConfig {
    int dimensionality = 2;
    int depth = 4;  // encoder stages, one pooling each
    long base_channels = 8;
    long code_channels = 64;  // must equal base_channels * 2^(depth-1)
    long in_channels = 1;
    AugSpec augmentation;

    void validate() const;
    nlohmann::json to_json() const;
    static DPGConfig from_json(const nlohmann::json& j);
};

// Self-supervised corruption of an image in [0,1]: gamma, additive Gaussian
// noise, Gaussian blur, random axis flips, all sampled deterministically
// under the seed; output clipped to [0,1].
Tensor augment(const Tensor& image, const AugSpec& spec, std::uint64_t seed);

// ----------------------------------------------------------------------------
// Convolutional autoencoder whose frozen encoder is the Domain Prior
// Generator. UNet-style stages without skip connections: every encoder stage
// is conv/BN/ReLU/pool, every decoder stage is upsample/conv/BN/ReLU, with a
// final 1x1 linear reconstruction conv.
// ----------------------------------------------------------------------------
class AutoEncoder {
public:
    struct Stage {
        nn::Conv conv;
        nn::BatchNorm bn;
    };

    struct Tape {
        struct StageCache {
            Tensor conv_in;
            nn::BatchNorm::Cache bn;
            Tensor out;
        };
        std::vector<StageCache> enc, dec;
        std::vector<std::vector<long>> pool_argmax;
        std::vector<Shape> pool_in_shape;
        std::vector<Shape> up_in_shape;
        Tensor head_in;
    };

    AutoEncoder() = default;
    explicit AutoEncoder(const DPGConfig& cfg);

    void init(std::uint64_t seed);

    // Bottleneck feature map (code_channels, *spatial / 2^depth); squeezes the
    // batch axis. Never mutates weights or running buffers.
    Tensor encode(const Tensor& image, StatsMode mode);

    // Full reconstruction pass (training).
    Tensor forward(const Tensor& x, StatsMode mode, bool update_running, Tape* tape);
    void backward(const Tensor& dout, const Tape& tape);

    nn::ParamMap params();
    void zero_grad();
    const DPGConfig& config() const { return cfg_; }

private:
    DPGConfig cfg_;
    std::vector<Stage> enc_, dec_;
    nn::Conv head_;
};

// --- spec-level surface -------------------------------------------------------

// Reconstruction pretraining over one or more dataset manifests (train
// splits). Caller asserts the corpus is disjoint from the segmentation data.
Checkpoint pretrain_dpg(const std::vector<DatasetManifest>& corpus, const DPGConfig& cfg,
                        const TrainConfig& train);

// Single feed-forward through the frozen encoder; no weight mutation.
DomainCode encode_domain(const Tensor& image, const Checkpoint& dpg);

// Hot path for callers that keep a live encoder around.
DomainCode encode_domain(const Tensor& image, AutoEncoder& dpg, const std::string& fingerprint);

AutoEncoder make_autoencoder(const Checkpoint& ckpt);
Checkpoint snapshot_autoencoder(AutoEncoder& ae, const nlohmann::json& metadata);

}  // namespace adaseg
