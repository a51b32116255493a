#include "adaseg/infer.hpp"

#include <chrono>

namespace adaseg {

namespace {

// Binary threshold on the foreground channel for two-class models, argmax
// over channels otherwise.
ByteTensor logits_to_mask(const Tensor& logits) {
    const long k = logits.dim(1);
    Shape sp(logits.shape.begin() + 2, logits.shape.end());
    const long s = numel_of(sp);
    ByteTensor mask(sp);
    if (k == 2) {
        const real* fg = logits.ptr() + s;  // channel 1 of the single instance
        for (long i = 0; i < s; ++i) mask.data[static_cast<std::size_t>(i)] = fg[i] > 0 ? 1 : 0;
    } else {
        for (long i = 0; i < s; ++i) {
            int best = 0;
            for (long c = 1; c < k; ++c)
                if (logits[c * s + i] > logits[best * s + i]) best = static_cast<int>(c);
            mask.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
        }
    }
    return mask;
}

Tensor logits_to_probs(const Tensor& logits) {
    const long k = logits.dim(1);
    Shape sp(logits.shape.begin() + 1, logits.shape.end());  // (K, *spatial)
    Tensor p = k == 2 ? sigmoid(logits) : softmax_channels(logits);
    return Tensor(sp, std::move(p.data));
}

}  // namespace

EpisodicRunner::EpisodicRunner(const Checkpoint& model, const Checkpoint& dpg)
    : net_(make_unet(model)), dpg_(make_autoencoder(dpg)), dpg_fp_(dpg.fingerprint()) {
    if (net_.config().norm != NormKind::AdaBN)
        throw contract_error("episodic inference requires an adaptive_unet checkpoint");
    if (!model.dpg_fingerprint.empty() && model.dpg_fingerprint != dpg_fp_)
        throw contract_error("model was trained against DPG " + model.dpg_fingerprint +
                             ", supplied " + dpg_fp_);
    if (net_.config().code_channels != dpg_.config().code_channels)
        throw shape_error("DPG code channels do not match the model's projections");
}

EpisodeResult EpisodicRunner::run(const Tensor& image, const std::string& instance_id) {
    const auto t0 = std::chrono::steady_clock::now();
    DomainCode code = encode_domain(image, dpg_, dpg_fp_);

    Shape batched = image.shape;
    batched.insert(batched.begin(), 1);
    Tensor x(batched, image.data);
    std::vector<const Tensor*> codes{&code.values};
    Tensor logits = net_.forward(x, codes, StatsMode::Instance, false, nullptr);

    EpisodeResult r;
    r.instance_id = instance_id;
    r.mask = logits_to_mask(logits);
    r.probs = logits_to_probs(logits);
    r.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Fnv1a h;
    h.update(code.source_fingerprint);
    h.update(code.values.data.data(), code.values.data.size() * sizeof(real));
    r.code_fingerprint = hex64(h.value());
    return r;
}

EpisodeResult adapt_and_segment(const Checkpoint& model, const Checkpoint& dpg,
                                const TestInstance& instance) {
    EpisodicRunner runner(model, dpg);
    // adaptation sees the image and id only; ground truth stays behind
    return runner.run(instance.image, instance.instance_id);
}

DiceReport episodic_eval(const Checkpoint& model, const Checkpoint& dpg,
                         const std::vector<TestInstance>& test_set) {
    for (const auto& inst : test_set)
        if (!inst.mask)
            throw validation_error("episodic_eval: instance " + inst.instance_id +
                                   " carries no ground truth");
    EpisodicRunner runner(model, dpg);
    std::vector<std::pair<std::string, ByteTensor>> preds;
    std::vector<ByteTensor> gts;
    double wall_total = 0;
    for (const auto& inst : test_set) {
        EpisodeResult r = runner.run(inst.image, inst.instance_id);
        wall_total += r.wall_time_sec;
        preds.emplace_back(r.instance_id, std::move(r.mask));
        gts.push_back(*inst.mask);
    }
    // order-invariant aggregation: sort the per-instance rows by id
    std::vector<std::size_t> idx(preds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return preds[a].first < preds[b].first; });
    std::vector<std::pair<std::string, ByteTensor>> preds_sorted;
    std::vector<ByteTensor> gts_sorted;
    for (std::size_t i : idx) {
        preds_sorted.push_back(std::move(preds[i]));
        gts_sorted.push_back(std::move(gts[i]));
    }

    nlohmann::json meta;
    meta["model_fingerprint"] = model.fingerprint();
    meta["dpg_fingerprint"] = dpg.fingerprint();
    meta["instances"] = preds_sorted.size();
    meta["wall_time_sec"] = wall_total;
    const long num_classes = ArchConfig::from_json(model.arch).num_classes;
    return score_predictions(preds_sorted, gts_sorted, num_classes, "adaptive", meta);
}

}  // namespace adaseg
