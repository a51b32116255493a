#include "adaseg/baselines.hpp"

#include <cmath>

#include "adaseg/optim.hpp"

namespace adaseg {

void TentConfig::validate() const {
    if (shots < 1) throw validation_error("tent: shots must be >= 1");
    if (lr < 0) throw validation_error("tent: lr must be >= 0");
    if (batch_size < 1) throw validation_error("tent: batch_size must be >= 1");
}

nlohmann::json TentConfig::to_json() const {
    return {{"shots", shots}, {"lr", lr}, {"batch_size", batch_size}};
}

TentConfig TentConfig::from_json(const nlohmann::json& j) {
    TentConfig c;
    c.shots = j.value("shots", 1L);
    c.lr = j.value("lr", real(1e-3));
    c.batch_size = j.value("batch_size", 8L);
    c.validate();
    return c;
}

real entropy_loss(const Tensor& probs) {
    if (probs.ndim() < 3)
        throw shape_error("entropy_loss: expected (batch, classes, *spatial) probabilities");
    for (real v : probs.data)
        if (!(v >= real(0) && v <= real(1)))
            throw validation_error("entropy_loss: probabilities must lie in [0,1]");
    const long b = probs.dim(0), k = probs.dim(1);
    long s = 1;
    for (int i = 2; i < probs.ndim(); ++i) s *= probs.dim(i);

    auto plogp = [](real p) { return p > real(0) ? p * std::log(p) : real(0); };
    real total = 0;
    for (long bi = 0; bi < b; ++bi)
        for (long i = 0; i < s; ++i) {
            real h = 0;
            if (k == 1) {
                const real p = probs[bi * s + i];
                h = -plogp(p) - plogp(real(1) - p);
            } else {
                for (long c = 0; c < k; ++c) h -= plogp(probs[(bi * k + c) * s + i]);
            }
            total += h;
        }
    return total / static_cast<real>(b * s);
}

real entropy_of_logits(const Tensor& logits) { return entropy_loss(softmax_channels(logits)); }

Tensor entropy_of_logits_grad(const Tensor& logits) {
    const long b = logits.dim(0), k = logits.dim(1);
    long s = 1;
    for (int i = 2; i < logits.ndim(); ++i) s *= logits.dim(i);
    Tensor p = softmax_channels(logits);
    Tensor g(logits.shape);
    const real norm = real(1) / static_cast<real>(b * s);
    for (long bi = 0; bi < b; ++bi)
        for (long i = 0; i < s; ++i) {
            real sum_plogp = 0;
            for (long c = 0; c < k; ++c) {
                const real pc = p[(bi * k + c) * s + i];
                if (pc > real(0)) sum_plogp += pc * std::log(pc);
            }
            for (long c = 0; c < k; ++c) {
                const real pc = p[(bi * k + c) * s + i];
                const real logpc = pc > real(0) ? std::log(pc) : real(0);
                g[(bi * k + c) * s + i] = norm * pc * (sum_plogp - logpc);
            }
        }
    return g;
}

namespace {

ByteTensor batch_logits_to_masks(const Tensor& logits, long instance, long k) {
    Shape sp(logits.shape.begin() + 2, logits.shape.end());
    const long s = numel_of(sp);
    ByteTensor mask(sp);
    const real* base = logits.ptr() + instance * k * s;
    if (k == 2) {
        for (long i = 0; i < s; ++i)
            mask.data[static_cast<std::size_t>(i)] = base[s + i] > 0 ? 1 : 0;
    } else {
        for (long i = 0; i < s; ++i) {
            int best = 0;
            for (long c = 1; c < k; ++c)
                if (base[c * s + i] > base[best * s + i]) best = static_cast<int>(c);
            mask.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
        }
    }
    return mask;
}

void require_plain(const Checkpoint& ckpt, const char* where) {
    if (ckpt.kind != "plain_unet")
        throw contract_error(std::string(where) + ": requires a plain_unet (norm=bn) checkpoint, got " +
                             ckpt.kind);
}

void require_ground_truth(const std::vector<TestInstance>& test_set, const char* where) {
    if (test_set.empty()) throw validation_error(std::string(where) + ": empty test set");
    for (const auto& inst : test_set)
        if (!inst.mask)
            throw validation_error(std::string(where) + ": instance " + inst.instance_id +
                                   " carries no ground truth");
}

DiceReport score_with_mode(UNet& net, const std::vector<TestInstance>& test_set, StatsMode mode,
                           long batch_size, const std::string& method,
                           const nlohmann::json& metadata) {
    const long k = net.config().num_classes;
    std::vector<std::pair<std::string, ByteTensor>> preds;
    std::vector<ByteTensor> gts;
    const long n = static_cast<long>(test_set.size());
    for (long start = 0; start < n; start += batch_size) {
        const long b = std::min(batch_size, n - start);
        std::vector<Tensor> images;
        for (long i = 0; i < b; ++i)
            images.push_back(test_set[static_cast<std::size_t>(start + i)].image);
        Tensor logits = net.forward(stack_images(images), {}, mode, false, nullptr);
        for (long i = 0; i < b; ++i) {
            const auto& inst = test_set[static_cast<std::size_t>(start + i)];
            preds.emplace_back(inst.instance_id, batch_logits_to_masks(logits, i, k));
            gts.push_back(*inst.mask);
        }
    }
    return score_predictions(preds, gts, k, method, metadata);
}

}  // namespace

DiceReport direct_test(const Checkpoint& plain_model, const std::vector<TestInstance>& test_set) {
    require_plain(plain_model, "direct_test");
    require_ground_truth(test_set, "direct_test");
    UNet net = make_unet(plain_model);
    nlohmann::json meta;
    meta["model_fingerprint"] = plain_model.fingerprint();
    meta["stats"] = "running";
    // frozen source running statistics; batch composition is irrelevant
    return score_with_mode(net, test_set, StatsMode::Running, 1, "direct", meta);
}

DiceReport batchstats_test(const Checkpoint& plain_model,
                           const std::vector<TestInstance>& test_set, long batch_size) {
    require_plain(plain_model, "batchstats_test");
    require_ground_truth(test_set, "batchstats_test");
    UNet net = make_unet(plain_model);
    nlohmann::json meta;
    meta["model_fingerprint"] = plain_model.fingerprint();
    meta["stats"] = "batch";
    return score_with_mode(net, test_set, StatsMode::Batch, batch_size, "direct-batchstats", meta);
}

real mean_test_entropy(const Checkpoint& plain_model, const std::vector<TestInstance>& test_set,
                       long batch_size) {
    require_plain(plain_model, "mean_test_entropy");
    if (test_set.empty()) throw validation_error("mean_test_entropy: empty test set");
    UNet net = make_unet(plain_model);
    real total = 0;
    long count = 0;
    const long n = static_cast<long>(test_set.size());
    for (long start = 0; start < n; start += batch_size) {
        const long b = std::min(batch_size, n - start);
        std::vector<Tensor> images;
        for (long i = 0; i < b; ++i)
            images.push_back(test_set[static_cast<std::size_t>(start + i)].image);
        Tensor logits = net.forward(stack_images(images), {}, StatsMode::Batch, false, nullptr);
        total += entropy_of_logits(logits) * static_cast<real>(b);
        count += b;
    }
    return total / static_cast<real>(count);
}

std::pair<Checkpoint, DiceReport> tent_adapt(const Checkpoint& plain_model,
                                             const std::vector<TestInstance>& test_set,
                                             const TentConfig& cfg) {
    cfg.validate();
    require_plain(plain_model, "tent_adapt");
    require_ground_truth(test_set, "tent_adapt");

    UNet net = make_unet(plain_model);  // private copy; the original is untouched

    // only the BN affine parameters take gradient steps
    nn::ParamMap affine;
    for (const auto& p : net.params()) {
        const bool is_affine = p.name.size() > 6 && (p.name.rfind(".gamma") == p.name.size() - 6 ||
                                                     p.name.rfind(".beta") == p.name.size() - 5);
        if (p.trainable && is_affine) affine.push_back(p);
    }
    Adam opt(affine);

    const long n = static_cast<long>(test_set.size());
    for (long shot = 0; shot < cfg.shots; ++shot) {
        for (long start = 0; start < n; start += cfg.batch_size) {
            const long b = std::min(cfg.batch_size, n - start);
            std::vector<Tensor> images;
            for (long i = 0; i < b; ++i)
                images.push_back(test_set[static_cast<std::size_t>(start + i)].image);
            Tensor x = stack_images(images);
            UNet::Tape tape;
            Tensor logits = net.forward(x, {}, StatsMode::Batch, false, &tape);
            if (cfg.lr > 0) {
                net.zero_grad();
                net.backward(entropy_of_logits_grad(logits), tape);
                opt.step(cfg.lr);
            }
        }
    }

    nlohmann::json meta;
    meta["model_fingerprint"] = plain_model.fingerprint();
    meta["tent"] = cfg.to_json();
    meta["stats"] = "batch";
    DiceReport report = score_with_mode(net, test_set, StatsMode::Batch, cfg.batch_size,
                                        "tent-" + std::to_string(cfg.shots), meta);

    nlohmann::json ck_meta = plain_model.metadata;
    ck_meta["tent"] = cfg.to_json();
    Checkpoint adapted = snapshot_model(net, "", ck_meta);
    return {std::move(adapted), std::move(report)};
}

}  // namespace adaseg
