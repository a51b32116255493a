#pragma once

#include <cstdint>
#include <optional>

#include <json.hpp>

#include "adaseg/checkpoint.hpp"
#include "adaseg/layers.hpp"
#include "adaseg/norm.hpp"

namespace adaseg {

enum class NormKind { AdaBN, BN };

std::string norm_kind_name(NormKind k);
NormKind norm_kind_from(const std::string& s);

struct ArchConfig {
    int dimensionality = 2;  // 2 or 3
    long in_channels = 1;
    long num_classes = 2;
    long base_channels = 16;
    int blocks = 5;  // per side, fixed
    NormKind norm = NormKind::AdaBN;
    int convs_per_block = 2;  // 1 or 2
    long code_channels = 0;   // required when norm == adabn
    bool adabn_track_running = false;

    void validate() const;
    nlohmann::json to_json() const;
    static ArchConfig from_json(const nlohmann::json& j);
};

// ----------------------------------------------------------------------------
// Adaptive UNet (norm=adabn) / plain-BN UNet (norm=bn).
//
// Encoder: 5 conv blocks with max-pooling after blocks 1..4 (channel ladder
// base * [1,2,4,8,16]). Decoder: 5 conv blocks; blocks 1..4 end with a x2
// linear upsample, blocks 2..5 take the matching encoder block's pre-pool
// output concatenated on channels. Head is a 1x1 conv emitting num_classes
// logit planes. Each conv is followed by normalization and ReLU.
// ----------------------------------------------------------------------------
class UNet {
public:
    struct NormUnit {
        NormKind kind = NormKind::BN;
        nn::BatchNorm bn;
        nn::AdaBN ada;

        struct Cache {
            nn::BatchNorm::Cache bn;
            nn::AdaBN::Cache ada;
        };
        Tensor forward(const Tensor& x, const std::vector<const Tensor*>& codes, StatsMode mode,
                       bool update_running, Cache* cache);
        Tensor backward(const Tensor& dy, const Cache& cache);
        void collect(const std::string& prefix, nn::ParamMap& out);
        void zero_grad();
    };

    struct ConvUnit {
        nn::Conv conv;
        NormUnit norm;
    };

    struct Block {
        std::vector<ConvUnit> units;
    };

    struct UnitCache {
        Tensor conv_in;  // activation feeding the conv, kept for the weight grad
        NormUnit::Cache norm;
        Tensor out;  // post-ReLU activation (doubles as the ReLU mask)
    };

    struct BlockCache {
        std::vector<UnitCache> units;
    };

    // One recorded forward pass; required for backward().
    struct Tape {
        std::vector<BlockCache> enc, dec;
        std::vector<std::vector<long>> pool_argmax;  // 4 pools
        std::vector<Shape> pool_in_shape;
        std::vector<Shape> up_in_shape;  // 4 upsamples
        Tensor head_in;
        std::vector<long> skip_channels;  // encoder channels at each concat
    };

    UNet() = default;
    explicit UNet(const ArchConfig& cfg);

    void init(std::uint64_t seed);

    // codes: one DomainCode tensor per batch instance (or a single one,
    // broadcast). Must be empty for norm=bn. When tape is null the pass keeps
    // no state (inference); update_running only applies to batch mode.
    Tensor forward(const Tensor& x, const std::vector<const Tensor*>& codes, StatsMode mode,
                   bool update_running, Tape* tape);

    // Returns d(loss)/d(input); accumulates parameter gradients.
    Tensor backward(const Tensor& dlogits, const Tape& tape);

    nn::ParamMap params();
    void zero_grad();

    const ArchConfig& config() const { return cfg_; }

private:
    Tensor run_block(Block& block, BlockCache* cache, const Tensor& x,
                     const std::vector<const Tensor*>& codes, StatsMode mode, bool update_running);
    Tensor back_block(Block& block, const BlockCache& cache, const Tensor& dy);

    ArchConfig cfg_;
    std::vector<Block> enc_, dec_;
    nn::Conv head_;
    std::vector<long> enc_ch_;
};

// --- spec-level surface -------------------------------------------------------

// Deterministic initialization under seed; returns an untrained checkpoint.
Checkpoint build_model(const ArchConfig& cfg, std::uint64_t seed);

// Reconstructs a live network from a checkpoint (validates names and shapes).
UNet make_unet(const Checkpoint& ckpt);

// Snapshot of a live network with the given provenance fields.
Checkpoint snapshot_model(UNet& net, const std::string& dpg_fingerprint,
                          const nlohmann::json& metadata);

// Pure single-call forward through a checkpointed model. code is required iff
// the model uses AdaBN; its source fingerprint must match the checkpoint's
// recorded dpg_fingerprint when both are present.
Tensor model_forward(const Checkpoint& ckpt, const Tensor& image,
                     const std::optional<DomainCode>& code, StatsMode mode);

}  // namespace adaseg
