#include "adaseg/train.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "adaseg/dpg.hpp"
#include "adaseg/model.hpp"
#include "adaseg/optim.hpp"

namespace adaseg {

void TrainConfig::validate() const {
    if (lr_min > lr_max) throw validation_error("train: lr_min must be <= lr_max");
    if (lr_max < 0) throw validation_error("train: learning rates must be >= 0");
    if (batch_size < 1) throw validation_error("train: batch_size must be >= 1");
    if (epochs < 0) throw validation_error("train: epochs must be >= 0");
    if (lambda < 0) throw validation_error("train: lambda must be >= 0");
    if (momentum < 0 || momentum >= 1) throw validation_error("train: momentum must be in [0,1)");
    if (eps_dice <= 0) throw validation_error("train: eps_dice must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["lambda"] = lambda;
    j["lr_max"] = lr_max;
    j["lr_min"] = lr_min;
    j["momentum"] = momentum;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["eps_dice"] = eps_dice;
    j["bce_mode"] = bce_mode == BceMode::Sigmoid ? "sigmoid" : "softmax";
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lambda = j.value("lambda", real(1));
    c.lr_max = j.value("lr_max", real(1e-4));
    c.lr_min = j.value("lr_min", real(1e-5));
    c.momentum = j.value("momentum", real(0.9));
    c.batch_size = j.value("batch_size", 8L);
    c.epochs = j.value("epochs", 1L);
    c.seed = j.value("seed", std::uint64_t(0));
    c.eps_dice = j.value("eps_dice", real(1e-6));
    const std::string mode = j.value("bce_mode", std::string("sigmoid"));
    if (mode == "sigmoid")
        c.bce_mode = BceMode::Sigmoid;
    else if (mode == "softmax")
        c.bce_mode = BceMode::SoftmaxCE;
    else
        throw validation_error("train: bce_mode must be sigmoid|softmax");
    c.validate();
    return c;
}

namespace {

// Shared epoch loop. codes_for(batch indices) returns the per-instance domain
// codes, or an empty vector for plain models.
Checkpoint run_training(UNet& net, const DatasetManifest& dataset, const TrainConfig& cfg,
                        const std::vector<Tensor>* precomputed_codes,
                        const std::string& dpg_fingerprint) {
    const long k = net.config().num_classes;
    std::vector<Tensor> images;
    std::vector<ByteTensor> masks;
    for (const auto& e : dataset.train) {
        images.push_back(load_image(dataset, e));
        masks.push_back(load_mask(dataset, e));
    }
    if (images.empty()) throw validation_error("train: dataset has no training pairs");
    if (dataset.num_classes != k)
        throw contract_error("train: dataset has " + std::to_string(dataset.num_classes) +
                             " classes, model expects " + std::to_string(k));

    Adam opt(net.params(), cfg.momentum);
    const long n = static_cast<long>(images.size());
    std::vector<long> order(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    nlohmann::json curve = nlohmann::json::array();
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        const real lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0xE10C + epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        real loss_sum = 0;
        long batches = 0;
        for (long start = 0; start < n; start += cfg.batch_size) {
            const long b = std::min(cfg.batch_size, n - start);
            std::vector<Tensor> batch_images;
            std::vector<ByteTensor> batch_masks;
            std::vector<const Tensor*> batch_codes;
            Shape mask_shape;
            for (long i = 0; i < b; ++i) {
                const long idx = order[static_cast<std::size_t>(start + i)];
                batch_images.push_back(images[static_cast<std::size_t>(idx)]);
                batch_masks.push_back(masks[static_cast<std::size_t>(idx)]);
                if (precomputed_codes)
                    batch_codes.push_back(&(*precomputed_codes)[static_cast<std::size_t>(idx)]);
            }
            Tensor x = stack_images(batch_images);
            ByteTensor mask_batch;
            {
                Shape ms = batch_masks[0].shape;
                ms.insert(ms.begin(), b);
                mask_batch = ByteTensor(ms);
                const long per = batch_masks[0].numel();
                for (long i = 0; i < b; ++i)
                    std::copy(batch_masks[static_cast<std::size_t>(i)].data.begin(),
                              batch_masks[static_cast<std::size_t>(i)].data.end(),
                              mask_batch.data.begin() + i * per);
            }
            Tensor target = one_hot(mask_batch, k);

            UNet::Tape tape;
            Tensor logits = net.forward(x, batch_codes, StatsMode::Batch, true, &tape);
            loss_sum += combined_loss(logits, target, cfg.lambda, cfg.eps_dice, cfg.bce_mode);
            ++batches;
            if (lr > 0) {
                net.zero_grad();
                net.backward(
                    combined_loss_grad(logits, target, cfg.lambda, cfg.eps_dice, cfg.bce_mode),
                    tape);
                opt.step(lr);
            }
        }
        nlohmann::json row;
        row["epoch"] = epoch;
        row["mean_loss"] = loss_sum / static_cast<real>(std::max<long>(batches, 1));
        row["lr"] = lr;
        curve.push_back(row);
    }

    nlohmann::json meta;
    meta["seed"] = cfg.seed;
    meta["epochs"] = cfg.epochs;
    meta["train_config"] = cfg.to_json();
    meta["dataset_tag"] = dataset.domain_tag;
    meta["loss_curve"] = curve;
    return snapshot_model(net, dpg_fingerprint, meta);
}

}  // namespace

Checkpoint train_source(const Checkpoint& model, const Checkpoint& dpg,
                        const DatasetManifest& dataset, const TrainConfig& cfg) {
    cfg.validate();
    if (model.kind != "adaptive_unet")
        throw contract_error("train_source: model must be an adaptive_unet (norm=adabn)");
    const std::string dpg_fp = dpg.fingerprint();
    if (!model.dpg_fingerprint.empty() && model.dpg_fingerprint != dpg_fp)
        throw contract_error("train_source: model was conditioned on DPG " +
                             model.dpg_fingerprint + ", got " + dpg_fp);

    UNet net = make_unet(model);
    AutoEncoder ae = make_autoencoder(dpg);
    if (ae.config().dimensionality != net.config().dimensionality)
        throw shape_error("train_source: DPG dimensionality does not match model");
    if (ae.config().code_channels != net.config().code_channels)
        throw shape_error("train_source: DPG code channels do not match model projections");

    // The DPG is frozen: codes are a pure function of each image, so they are
    // computed once up front.
    std::vector<Tensor> codes;
    for (const auto& e : dataset.train)
        codes.push_back(encode_domain(load_image(dataset, e), ae, dpg_fp).values);

    return run_training(net, dataset, cfg, &codes, dpg_fp);
}

Checkpoint train_plain(const Checkpoint& model, const DatasetManifest& dataset,
                       const TrainConfig& cfg) {
    cfg.validate();
    if (model.kind != "plain_unet")
        throw contract_error("train_plain: model must be a plain_unet (norm=bn)");
    UNet net = make_unet(model);
    return run_training(net, dataset, cfg, nullptr, "");
}

void write_loss_curve_csv(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write " + path.string());
    f << "epoch,mean_loss,lr\n";
    if (ckpt.metadata.contains("loss_curve"))
        for (const auto& row : ckpt.metadata["loss_curve"])
            f << row.at("epoch").get<long>() << "," << row.at("mean_loss").get<real>() << ","
              << row.at("lr").get<real>() << "\n";
}

}  // namespace adaseg
