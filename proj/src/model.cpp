#include "adaseg/model.hpp"

#include <cmath>

namespace adaseg {

std::string norm_kind_name(NormKind k) { return k == NormKind::AdaBN ? "adabn" : "bn"; }

NormKind norm_kind_from(const std::string& s) {
    if (s == "adabn") return NormKind::AdaBN;
    if (s == "bn") return NormKind::BN;
    throw validation_error("unknown norm kind '" + s + "' (expected adabn|bn)");
}

void ArchConfig::validate() const {
    if (dimensionality != 2 && dimensionality != 3)
        throw validation_error("arch: dimensionality must be 2 or 3");
    if (in_channels < 1 || num_classes < 2 || base_channels < 1)
        throw validation_error("arch: in_channels >= 1, num_classes >= 2, base_channels >= 1");
    if (blocks != 5) throw validation_error("arch: blocks is fixed at 5 per side");
    if (convs_per_block != 1 && convs_per_block != 2)
        throw validation_error("arch: convs_per_block must be 1 or 2");
    if (norm == NormKind::AdaBN && code_channels < 1)
        throw validation_error("arch: code_channels required for norm=adabn");
}

nlohmann::json ArchConfig::to_json() const {
    nlohmann::json j;
    j["dimensionality"] = dimensionality;
    j["in_channels"] = in_channels;
    j["num_classes"] = num_classes;
    j["base_channels"] = base_channels;
    j["blocks"] = blocks;
    j["norm"] = norm_kind_name(norm);
    j["convs_per_block"] = convs_per_block;
    j["code_channels"] = code_channels;
    j["adabn_track_running"] = adabn_track_running;
    return j;
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
    ArchConfig c;
    c.dimensionality = j.value("dimensionality", 2);
    c.in_channels = j.value("in_channels", 1L);
    c.num_classes = j.value("num_classes", 2L);
    c.base_channels = j.value("base_channels", 16L);
    c.blocks = j.value("blocks", 5);
    c.norm = norm_kind_from(j.value("norm", std::string("adabn")));
    c.convs_per_block = j.value("convs_per_block", 2);
    c.code_channels = j.value("code_channels", 0L);
    c.adabn_track_running = j.value("adabn_track_running", false);
    c.validate();
    return c;
}

// ============================================================================
// NormUnit
// ============================================================================

Tensor UNet::NormUnit::forward(const Tensor& x, const std::vector<const Tensor*>& codes,
                               StatsMode mode, bool update_running, Cache* cache) {
    if (kind == NormKind::BN)
        return bn.forward(x, mode, update_running, cache ? &cache->bn : nullptr);
    return ada.forward(x, codes, mode, update_running, cache ? &cache->ada : nullptr);
}

Tensor UNet::NormUnit::backward(const Tensor& dy, const Cache& cache) {
    if (kind == NormKind::BN) return bn.backward(dy, cache.bn);
    return ada.backward(dy, cache.ada);
}

void UNet::NormUnit::collect(const std::string& prefix, nn::ParamMap& out) {
    if (kind == NormKind::BN)
        bn.collect(prefix, out);
    else
        ada.collect(prefix, out);
}

void UNet::NormUnit::zero_grad() {
    if (kind == NormKind::BN)
        bn.zero_grad();
    else
        ada.zero_grad();
}

// ============================================================================
// UNet
// ============================================================================

namespace {

UNet::Block make_block(const ArchConfig& cfg, long cin, long cout) {
    UNet::Block b;
    const int nd = cfg.dimensionality;
    for (int u = 0; u < cfg.convs_per_block; ++u) {
        UNet::ConvUnit unit;
        unit.conv = nn::Conv(u == 0 ? cin : cout, cout, 3, nd);
        unit.norm.kind = cfg.norm;
        if (cfg.norm == NormKind::BN) {
            unit.norm.bn = nn::BatchNorm(cout);
        } else {
            unit.norm.ada = nn::AdaBN(cout, cfg.code_channels);
            unit.norm.ada.track_running = cfg.adabn_track_running;
        }
        b.units.push_back(std::move(unit));
    }
    return b;
}

}  // namespace

UNet::UNet(const ArchConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    enc_ch_.clear();
    for (int i = 0; i < cfg_.blocks; ++i) enc_ch_.push_back(cfg_.base_channels << i);

    for (int i = 0; i < cfg_.blocks; ++i)
        enc_.push_back(make_block(cfg_, i == 0 ? cfg_.in_channels : enc_ch_[i - 1], enc_ch_[i]));

    // decoder blocks 1..4 halve the ladder; block 5 stays at base width
    dec_.push_back(make_block(cfg_, enc_ch_[4], enc_ch_[3]));                 // 16b -> 8b
    dec_.push_back(make_block(cfg_, enc_ch_[3] + enc_ch_[3], enc_ch_[2]));    // (8b+8b) -> 4b
    dec_.push_back(make_block(cfg_, enc_ch_[2] + enc_ch_[2], enc_ch_[1]));    // (4b+4b) -> 2b
    dec_.push_back(make_block(cfg_, enc_ch_[1] + enc_ch_[1], enc_ch_[0]));    // (2b+2b) -> b
    dec_.push_back(make_block(cfg_, enc_ch_[0] + enc_ch_[0], enc_ch_[0]));    // (b+b) -> b

    head_ = nn::Conv(enc_ch_[0], cfg_.num_classes, 1, cfg_.dimensionality);
}

void UNet::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto init_block = [&rng](Block& b) {
        for (auto& u : b.units) {
            u.conv.init_he(rng);
            if (u.norm.kind == NormKind::AdaBN) u.norm.ada.init_projection(rng);
        }
    };
    for (auto& b : enc_) init_block(b);
    for (auto& b : dec_) init_block(b);
    head_.init_he(rng);
}

Tensor UNet::run_block(Block& block, BlockCache* cache, const Tensor& x,
                       const std::vector<const Tensor*>& codes, StatsMode mode,
                       bool update_running) {
    Tensor cur = x;
    for (std::size_t u = 0; u < block.units.size(); ++u) {
        UnitCache* uc = nullptr;
        if (cache) {
            cache->units.emplace_back();
            uc = &cache->units.back();
            uc->conv_in = cur;
        }
        Tensor t = block.units[u].conv.forward(cur);
        t = block.units[u].norm.forward(t, codes, mode, update_running, uc ? &uc->norm : nullptr);
        cur = nn::Relu::forward(t);
        if (uc) uc->out = cur;
    }
    return cur;
}

Tensor UNet::back_block(Block& block, const BlockCache& cache, const Tensor& dy) {
    Tensor g = dy;
    for (long u = static_cast<long>(block.units.size()) - 1; u >= 0; --u) {
        const UnitCache& uc = cache.units[static_cast<std::size_t>(u)];
        g = nn::Relu::backward(g, uc.out);
        g = block.units[static_cast<std::size_t>(u)].norm.backward(g, uc.norm);
        block.units[static_cast<std::size_t>(u)].conv.backward_param(g, uc.conv_in);
        g = block.units[static_cast<std::size_t>(u)].conv.backward_data(g);
    }
    return g;
}

Tensor UNet::forward(const Tensor& x, const std::vector<const Tensor*>& codes, StatsMode mode,
                     bool update_running, Tape* tape) {
    if (x.ndim() != cfg_.dimensionality + 2)
        throw shape_error("UNet::forward: expected " + std::to_string(cfg_.dimensionality + 2) +
                          "-d input, got " + shape_str(x.shape));
    if (x.dim(1) != cfg_.in_channels)
        throw shape_error("UNet::forward: expected " + std::to_string(cfg_.in_channels) +
                          " input channels, got " + std::to_string(x.dim(1)));
    for (int i = 2; i < x.ndim(); ++i)
        if (x.dim(i) % 16 != 0)
            throw shape_error("UNet::forward: spatial dims must be divisible by 16, got " +
                              shape_str(x.shape));
    if (cfg_.norm == NormKind::AdaBN && codes.empty())
        throw contract_error("UNet::forward: norm=adabn requires a domain code");
    if (cfg_.norm == NormKind::BN && !codes.empty())
        throw contract_error("UNet::forward: norm=bn takes no domain code");
    if (cfg_.norm == NormKind::AdaBN && mode == StatsMode::Running && !cfg_.adabn_track_running)
        throw contract_error("UNet::forward: running stats disabled for this adabn model");

    if (tape) {
        tape->enc.resize(enc_.size());
        tape->dec.resize(dec_.size());
        tape->pool_argmax.resize(4);
        tape->pool_in_shape.resize(4);
        tape->up_in_shape.resize(4);
        tape->skip_channels.clear();
    }

    // encoder; pre-pool outputs are the skip sources
    std::vector<Tensor> skips;
    Tensor cur = x;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
        cur = run_block(enc_[i], tape ? &tape->enc[i] : nullptr, cur, codes, mode, update_running);
        if (i + 1 < enc_.size()) {
            skips.push_back(cur);
            std::vector<long> argmax;
            if (tape) tape->pool_in_shape[i] = cur.shape;
            cur = nn::MaxPool::forward(cur, argmax);
            if (tape) tape->pool_argmax[i] = std::move(argmax);
        }
    }

    // decoder
    for (std::size_t j = 0; j < dec_.size(); ++j) {
        Tensor in;
        if (j == 0) {
            in = std::move(cur);
        } else {
            const Tensor& skip = skips[skips.size() - j];
            if (tape) tape->skip_channels.push_back(cur.dim(1));
            in = nn::concat_channels(cur, skip);
        }
        cur = run_block(dec_[j], tape ? &tape->dec[j] : nullptr, in, codes, mode, update_running);
        if (j + 1 < dec_.size()) {
            if (tape) tape->up_in_shape[j] = cur.shape;
            cur = nn::Upsample::forward(cur);
        }
    }

    if (tape) tape->head_in = cur;
    return head_.forward(cur);
}

Tensor UNet::backward(const Tensor& dlogits, const Tape& tape) {
    head_.backward_param(dlogits, tape.head_in);
    Tensor g = head_.backward_data(dlogits);

    // skip gradients surface in reverse decoder order: dec block 5 pairs with
    // encoder block 1, block 4 with block 2, ...
    std::vector<Tensor> skip_grads(4);
    for (long j = static_cast<long>(dec_.size()) - 1; j >= 0; --j) {
        if (j + 1 < static_cast<long>(dec_.size()))
            g = nn::Upsample::backward(g, tape.up_in_shape[static_cast<std::size_t>(j)]);
        g = back_block(dec_[static_cast<std::size_t>(j)], tape.dec[static_cast<std::size_t>(j)],
                       g);
        if (j > 0) {
            Tensor dup, dskip;
            nn::split_channels(g, tape.skip_channels[static_cast<std::size_t>(j - 1)], dup, dskip);
            skip_grads[static_cast<std::size_t>(4 - j)] = std::move(dskip);
            g = std::move(dup);
        }
    }

    // encoder, accumulating pooled-path and skip-path gradients
    for (long i = static_cast<long>(enc_.size()) - 1; i >= 0; --i) {
        if (i < static_cast<long>(enc_.size()) - 1) {
            g = nn::MaxPool::backward(g, tape.pool_argmax[static_cast<std::size_t>(i)],
                                      tape.pool_in_shape[static_cast<std::size_t>(i)]);
            Tensor& sg = skip_grads[static_cast<std::size_t>(i)];
            for (long k = 0; k < g.numel(); ++k) g[k] += sg[k];
        }
        g = back_block(enc_[static_cast<std::size_t>(i)], tape.enc[static_cast<std::size_t>(i)],
                       g);
    }
    return g;
}

nn::ParamMap UNet::params() {
    nn::ParamMap out;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
        const std::string bp = "encoder.block" + std::to_string(i + 1);
        for (std::size_t u = 0; u < enc_[i].units.size(); ++u) {
            enc_[i].units[u].conv.collect(bp + ".conv" + std::to_string(u + 1), out);
            enc_[i].units[u].norm.collect(bp + ".norm" + std::to_string(u + 1), out);
        }
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
        const std::string bp = "decoder.block" + std::to_string(i + 1);
        for (std::size_t u = 0; u < dec_[i].units.size(); ++u) {
            dec_[i].units[u].conv.collect(bp + ".conv" + std::to_string(u + 1), out);
            dec_[i].units[u].norm.collect(bp + ".norm" + std::to_string(u + 1), out);
        }
    }
    head_.collect("head", out);
    return out;
}

void UNet::zero_grad() {
    for (auto& b : enc_)
        for (auto& u : b.units) {
            u.conv.zero_grad();
            u.norm.zero_grad();
        }
    for (auto& b : dec_)
        for (auto& u : b.units) {
            u.conv.zero_grad();
            u.norm.zero_grad();
        }
    head_.zero_grad();
}

// ============================================================================
// Spec-level surface
// ============================================================================

Checkpoint build_model(const ArchConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    UNet net(cfg);
    net.init(seed);
    nlohmann::json meta;
    meta["seed"] = seed;
    meta["epochs"] = 0;
    return snapshot_model(net, "", meta);
}

UNet make_unet(const Checkpoint& ckpt) {
    if (ckpt.kind != "adaptive_unet" && ckpt.kind != "plain_unet")
        throw contract_error("make_unet: checkpoint kind '" + ckpt.kind + "' is not a UNet");
    UNet net(ArchConfig::from_json(ckpt.arch));
    auto params = net.params();
    for (auto& p : params) {
        const Tensor* src = ckpt.find(p.name);
        if (!src) throw io_error("checkpoint missing tensor " + p.name);
        if (src->shape != p.value->shape)
            throw shape_error("checkpoint tensor " + p.name + " has shape " +
                              shape_str(src->shape) + ", expected " + shape_str(p.value->shape));
        *p.value = *src;
    }
    return net;
}

Checkpoint snapshot_model(UNet& net, const std::string& dpg_fingerprint,
                          const nlohmann::json& metadata) {
    Checkpoint ckpt;
    ckpt.kind = net.config().norm == NormKind::AdaBN ? "adaptive_unet" : "plain_unet";
    ckpt.arch = net.config().to_json();
    ckpt.dpg_fingerprint = dpg_fingerprint;
    ckpt.metadata = metadata;
    for (auto& p : net.params()) ckpt.tensors.emplace_back(p.name, *p.value);
    return ckpt;
}

Tensor model_forward(const Checkpoint& ckpt, const Tensor& image,
                     const std::optional<DomainCode>& code, StatsMode mode) {
    UNet net = make_unet(ckpt);
    std::vector<const Tensor*> codes;
    if (net.config().norm == NormKind::AdaBN) {
        if (!code) throw contract_error("model_forward: norm=adabn requires a domain code");
        if (!ckpt.dpg_fingerprint.empty() && !code->source_fingerprint.empty() &&
            ckpt.dpg_fingerprint != code->source_fingerprint)
            throw contract_error("model_forward: code fingerprint " + code->source_fingerprint +
                                 " does not match model's DPG " + ckpt.dpg_fingerprint);
        codes.push_back(&code->values);
    } else if (code) {
        throw contract_error("model_forward: norm=bn takes no domain code");
    }
    return net.forward(image, codes, mode, false, nullptr);
}

}  // namespace adaseg
