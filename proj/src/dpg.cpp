#include "adaseg/dpg.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "adaseg/optim.hpp"

namespace adaseg {

// ============================================================================
// AugSpec / DPGConfig
// ============================================================================

void AugSpec::validate() const {
    if (gamma_range[0] > gamma_range[1] || blur_sigma_range[0] > blur_sigma_range[1])
        throw validation_error("augment: range lo must be <= hi");
    if (gamma_range[0] <= 0) throw validation_error("augment: gamma must be positive");
    if (noise_std < 0 || blur_sigma_range[0] < 0)
        throw validation_error("augment: noise_std and blur_sigma must be >= 0");
    if (flip_prob < 0 || flip_prob > 1)
        throw validation_error("augment: flip_prob must be in [0,1]");
}

nlohmann::json AugSpec::to_json() const {
    nlohmann::json j;
    j["gamma_range"] = gamma_range;
    j["noise_std"] = noise_std;
    j["blur_sigma_range"] = blur_sigma_range;
    j["flip_prob"] = flip_prob;
    return j;
}

AugSpec AugSpec::from_json(const nlohmann::json& j) {
    AugSpec s;
    if (j.contains("gamma_range")) s.gamma_range = j["gamma_range"];
    s.noise_std = j.value("noise_std", real(0));
    if (j.contains("blur_sigma_range")) s.blur_sigma_range = j["blur_sigma_range"];
    s.flip_prob = j.value("flip_prob", real(0));
    s.validate();
    return s;
}

void DPGConfig::validate() const {
    if (dimensionality != 2 && dimensionality != 3)
        throw validation_error("dpg: dimensionality must be 2 or 3");
    if (depth < 1 || depth > 6) throw validation_error("dpg: depth must be in [1, 6]");
    if (base_channels < 1 || in_channels < 1)
        throw validation_error("dpg: base_channels and in_channels must be >= 1");
    if (code_channels != (base_channels << (depth - 1)))
        throw validation_error("dpg: code_channels must equal base_channels * 2^(depth-1) = " +
                               std::to_string(base_channels << (depth - 1)));
    augmentation.validate();
}

nlohmann::json DPGConfig::to_json() const {
    nlohmann::json j;
    j["dimensionality"] = dimensionality;
    j["depth"] = depth;
    j["base_channels"] = base_channels;
    j["code_channels"] = code_channels;
    j["in_channels"] = in_channels;
    j["augmentation"] = augmentation.to_json();
    return j;
}

DPGConfig DPGConfig::from_json(const nlohmann::json& j) {
    DPGConfig c;
    c.dimensionality = j.value("dimensionality", 2);
    c.depth = j.value("depth", 4);
    c.base_channels = j.value("base_channels", 8L);
    c.code_channels = j.value("code_channels", c.base_channels << (c.depth - 1));
    c.in_channels = j.value("in_channels", 1L);
    if (j.contains("augmentation")) c.augmentation = AugSpec::from_json(j["augmentation"]);
    c.validate();
    return c;
}

// ============================================================================
// augment
// ============================================================================

namespace {

void flip_axis(Tensor& image, int spatial_axis) {
    // image is (C, *spatial)
    const int nd = image.ndim() - 1;
    std::vector<long> sp(image.shape.begin() + 1, image.shape.end());
    std::vector<long> strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i + 1)] * sp[static_cast<std::size_t>(i + 1)];
    const long s = numel_of(Shape(sp.begin(), sp.end()));
    const long n = sp[static_cast<std::size_t>(spatial_axis)];
    const long stride = strides[static_cast<std::size_t>(spatial_axis)];
    for (long c = 0; c < image.dim(0); ++c) {
        real* base = image.ptr() + c * s;
        for (long i = 0; i < s; ++i) {
            const long pos = (i / stride) % n;
            if (pos >= n - 1 - pos) continue;
            const long j = i + (n - 1 - 2 * pos) * stride;
            std::swap(base[i], base[j]);
        }
    }
}

void blur_image(Tensor& image, real sigma);  // forward decl; shares data.cpp logic

// local separable blur (replicated here to keep data.cpp internals private)
void blur_axis(std::vector<real>& buf, std::vector<real>& tmp, const std::vector<long>& sp,
               int axis, real sigma) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    if (radius < 1) return;
    std::vector<real> kernel(static_cast<std::size_t>(2 * radius + 1));
    real sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] =
            std::exp(-real(0.5) * i * i / (sigma * sigma));
        sum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= sum;
    const int nd = static_cast<int>(sp.size());
    std::vector<long> strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i + 1)] * sp[static_cast<std::size_t>(i + 1)];
    const long n = sp[static_cast<std::size_t>(axis)];
    const long stride = strides[static_cast<std::size_t>(axis)];
    tmp = buf;
    for (long base = 0; base < static_cast<long>(buf.size()); ++base) {
        const long pos = (base / stride) % n;
        real acc = 0;
        for (int k = -radius; k <= radius; ++k) {
            const long p = std::clamp<long>(pos + k, 0, n - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[base + (p - pos) * stride];
        }
        buf[static_cast<std::size_t>(base)] = acc;
    }
}

void blur_image(Tensor& image, real sigma) {
    if (sigma <= 0) return;
    std::vector<long> sp(image.shape.begin() + 1, image.shape.end());
    const long s = numel_of(Shape(sp.begin(), sp.end()));
    std::vector<real> tmp;
    for (long c = 0; c < image.dim(0); ++c) {
        std::vector<real> plane(image.data.begin() + c * s, image.data.begin() + (c + 1) * s);
        for (int a = 0; a < static_cast<int>(sp.size()); ++a) blur_axis(plane, tmp, sp, a, sigma);
        std::copy(plane.begin(), plane.end(), image.data.begin() + c * s);
    }
}

}  // namespace

Tensor augment(const Tensor& image, const AugSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (image.ndim() < 3)
        throw shape_error("augment: expected (channels, *spatial) image, got " +
                          shape_str(image.shape));
    for (real v : image.data)
        if (!(v >= real(0) && v <= real(1)))
            throw validation_error("augment: image intensities must lie in [0,1]");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<real> uni(0, 1);
    const real gamma =
        spec.gamma_range[0] + (spec.gamma_range[1] - spec.gamma_range[0]) * uni(rng);
    const real sigma =
        spec.blur_sigma_range[0] + (spec.blur_sigma_range[1] - spec.blur_sigma_range[0]) * uni(rng);
    const int nd = image.ndim() - 1;
    std::vector<bool> flips(static_cast<std::size_t>(nd));
    for (int a = 0; a < nd; ++a) flips[static_cast<std::size_t>(a)] = uni(rng) < spec.flip_prob;

    Tensor out = image;
    if (gamma != real(1))
        for (auto& v : out.data) v = std::pow(v, gamma);
    if (spec.noise_std > 0) {
        std::normal_distribution<real> noise(0, spec.noise_std);
        for (auto& v : out.data) v += noise(rng);
    }
    if (sigma > 0) blur_image(out, sigma);
    for (int a = 0; a < nd; ++a)
        if (flips[static_cast<std::size_t>(a)]) flip_axis(out, a);
    for (auto& v : out.data) v = std::clamp(v, real(0), real(1));
    return out;
}

// ============================================================================
// AutoEncoder
// ============================================================================

AutoEncoder::AutoEncoder(const DPGConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int nd = cfg_.dimensionality;
    for (int i = 0; i < cfg_.depth; ++i) {
        const long cin = i == 0 ? cfg_.in_channels : (cfg_.base_channels << (i - 1));
        const long cout = cfg_.base_channels << i;
        enc_.push_back({nn::Conv(cin, cout, 3, nd), nn::BatchNorm(cout)});
    }
    for (int i = 0; i < cfg_.depth; ++i) {
        const long cin = cfg_.base_channels << (cfg_.depth - 1 - i);
        const long cout = i == cfg_.depth - 1 ? cfg_.base_channels
                                              : (cfg_.base_channels << (cfg_.depth - 2 - i));
        dec_.push_back({nn::Conv(cin, cout, 3, nd), nn::BatchNorm(cout)});
    }
    head_ = nn::Conv(cfg_.base_channels, cfg_.in_channels, 1, nd);
}

void AutoEncoder::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& s : enc_) s.conv.init_he(rng);
    for (auto& s : dec_) s.conv.init_he(rng);
    head_.init_he(rng);
}

Tensor AutoEncoder::encode(const Tensor& image, StatsMode mode) {
    Tensor x = image;
    if (x.ndim() == cfg_.dimensionality + 1) {
        // add batch axis
        Shape s = x.shape;
        s.insert(s.begin(), 1);
        x = Tensor(s, std::move(x.data));
    }
    if (x.ndim() != cfg_.dimensionality + 2)
        throw shape_error("DPG encode: image rank does not match dimensionality " +
                          std::to_string(cfg_.dimensionality));
    for (int i = 2; i < x.ndim(); ++i)
        if (x.dim(i) % (1 << cfg_.depth) != 0)
            throw shape_error("DPG encode: spatial dims must be divisible by 2^depth = " +
                              std::to_string(1 << cfg_.depth));
    std::vector<long> argmax;
    for (auto& stage : enc_) {
        x = stage.conv.forward(x);
        x = stage.bn.forward(x, mode, false, nullptr);
        x = nn::Relu::forward(x);
        x = nn::MaxPool::forward(x, argmax);
    }
    return x;
}

Tensor AutoEncoder::forward(const Tensor& x, StatsMode mode, bool update_running, Tape* tape) {
    if (x.ndim() != cfg_.dimensionality + 2)
        throw shape_error("AutoEncoder::forward: expected batched input");
    Tensor cur = x;
    if (tape) {
        tape->enc.clear();
        tape->dec.clear();
        tape->pool_argmax.resize(static_cast<std::size_t>(cfg_.depth));
        tape->pool_in_shape.resize(static_cast<std::size_t>(cfg_.depth));
        tape->up_in_shape.resize(static_cast<std::size_t>(cfg_.depth));
    }
    for (std::size_t i = 0; i < enc_.size(); ++i) {
        Tape::StageCache* sc = nullptr;
        if (tape) {
            tape->enc.emplace_back();
            sc = &tape->enc.back();
            sc->conv_in = cur;
        }
        Tensor t = enc_[i].conv.forward(cur);
        t = enc_[i].bn.forward(t, mode, update_running, sc ? &sc->bn : nullptr);
        cur = nn::Relu::forward(t);
        if (sc) sc->out = cur;
        std::vector<long> argmax;
        if (tape) tape->pool_in_shape[i] = cur.shape;
        cur = nn::MaxPool::forward(cur, argmax);
        if (tape) tape->pool_argmax[i] = std::move(argmax);
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
        if (tape) tape->up_in_shape[i] = cur.shape;
        cur = nn::Upsample::forward(cur);
        Tape::StageCache* sc = nullptr;
        if (tape) {
            tape->dec.emplace_back();
            sc = &tape->dec.back();
            sc->conv_in = cur;
        }
        Tensor t = dec_[i].conv.forward(cur);
        t = dec_[i].bn.forward(t, mode, update_running, sc ? &sc->bn : nullptr);
        cur = nn::Relu::forward(t);
        if (sc) sc->out = cur;
    }
    if (tape) tape->head_in = cur;
    return head_.forward(cur);
}

void AutoEncoder::backward(const Tensor& dout, const Tape& tape) {
    head_.backward_param(dout, tape.head_in);
    Tensor g = head_.backward_data(dout);
    for (long i = static_cast<long>(dec_.size()) - 1; i >= 0; --i) {
        const auto& sc = tape.dec[static_cast<std::size_t>(i)];
        g = nn::Relu::backward(g, sc.out);
        g = dec_[static_cast<std::size_t>(i)].bn.backward(g, sc.bn);
        dec_[static_cast<std::size_t>(i)].conv.backward_param(g, sc.conv_in);
        g = dec_[static_cast<std::size_t>(i)].conv.backward_data(g);
        g = nn::Upsample::backward(g, tape.up_in_shape[static_cast<std::size_t>(i)]);
    }
    for (long i = static_cast<long>(enc_.size()) - 1; i >= 0; --i) {
        const auto& sc = tape.enc[static_cast<std::size_t>(i)];
        g = nn::MaxPool::backward(g, tape.pool_argmax[static_cast<std::size_t>(i)],
                                  tape.pool_in_shape[static_cast<std::size_t>(i)]);
        g = nn::Relu::backward(g, sc.out);
        g = enc_[static_cast<std::size_t>(i)].bn.backward(g, sc.bn);
        enc_[static_cast<std::size_t>(i)].conv.backward_param(g, sc.conv_in);
        g = enc_[static_cast<std::size_t>(i)].conv.backward_data(g);
    }
}

nn::ParamMap AutoEncoder::params() {
    nn::ParamMap out;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
        const std::string p = "encoder.stage" + std::to_string(i + 1);
        enc_[i].conv.collect(p + ".conv", out);
        enc_[i].bn.collect(p + ".norm", out);
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
        const std::string p = "decoder.stage" + std::to_string(i + 1);
        dec_[i].conv.collect(p + ".conv", out);
        dec_[i].bn.collect(p + ".norm", out);
    }
    head_.collect("output", out);
    return out;
}

void AutoEncoder::zero_grad() {
    for (auto& s : enc_) {
        s.conv.zero_grad();
        s.bn.zero_grad();
    }
    for (auto& s : dec_) {
        s.conv.zero_grad();
        s.bn.zero_grad();
    }
    head_.zero_grad();
}

AutoEncoder make_autoencoder(const Checkpoint& ckpt) {
    if (ckpt.kind != "dpg_autoencoder")
        throw contract_error("make_autoencoder: checkpoint kind '" + ckpt.kind +
                             "' is not a dpg_autoencoder");
    AutoEncoder ae(DPGConfig::from_json(ckpt.arch));
    for (auto& p : ae.params()) {
        const Tensor* src = ckpt.find(p.name);
        if (!src) throw io_error("checkpoint missing tensor " + p.name);
        if (src->shape != p.value->shape)
            throw shape_error("checkpoint tensor " + p.name + " has unexpected shape");
        *p.value = *src;
    }
    return ae;
}

Checkpoint snapshot_autoencoder(AutoEncoder& ae, const nlohmann::json& metadata) {
    Checkpoint ckpt;
    ckpt.kind = "dpg_autoencoder";
    ckpt.arch = ae.config().to_json();
    ckpt.metadata = metadata;
    for (auto& p : ae.params()) ckpt.tensors.emplace_back(p.name, *p.value);
    return ckpt;
}

// ============================================================================
// pretrain / encode
// ============================================================================

Checkpoint pretrain_dpg(const std::vector<DatasetManifest>& corpus, const DPGConfig& cfg,
                        const TrainConfig& train) {
    cfg.validate();
    train.validate();

    std::vector<Tensor> images;
    for (const auto& m : corpus) {
        if (m.dimensionality != cfg.dimensionality)
            throw shape_error("pretrain_dpg: corpus dimensionality " +
                              std::to_string(m.dimensionality) + " does not match config");
        for (const auto& e : m.train) images.push_back(load_image(m, e));
    }
    if (images.empty()) throw validation_error("pretrain_dpg: empty corpus");

    AutoEncoder ae(cfg);
    ae.init(train.seed);
    Adam opt(ae.params(), train.momentum);

    const long n = static_cast<long>(images.size());
    std::vector<long> order(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    nlohmann::json curve = nlohmann::json::array();
    for (long epoch = 0; epoch < train.epochs; ++epoch) {
        const real lr = cosine_lr(epoch, train.epochs, train.lr_max, train.lr_min);
        std::mt19937_64 shuffle_rng(mix_seed(train.seed, 0x5151 + epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        real loss_sum = 0;
        long batches = 0;
        for (long start = 0; start < n; start += train.batch_size) {
            const long b = std::min(train.batch_size, n - start);
            std::vector<Tensor> clean, corrupted;
            for (long i = 0; i < b; ++i) {
                const long idx = order[static_cast<std::size_t>(start + i)];
                clean.push_back(images[static_cast<std::size_t>(idx)]);
                corrupted.push_back(augment(images[static_cast<std::size_t>(idx)],
                                            cfg.augmentation,
                                            mix_seed(train.seed, epoch * n + idx)));
            }
            Tensor x = stack_images(corrupted);
            Tensor target = stack_images(clean);
            AutoEncoder::Tape tape;
            Tensor recon = ae.forward(x, StatsMode::Batch, true, &tape);
            loss_sum += mse_loss(recon, target);
            ++batches;
            if (lr > 0) {
                ae.zero_grad();
                ae.backward(mse_loss_grad(recon, target), tape);
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
    meta["seed"] = train.seed;
    meta["epochs"] = train.epochs;
    meta["corpus_size"] = n;
    meta["loss_curve"] = curve;
    return snapshot_autoencoder(ae, meta);
}

DomainCode encode_domain(const Tensor& image, const Checkpoint& dpg) {
    AutoEncoder ae = make_autoencoder(dpg);
    return encode_domain(image, ae, dpg.fingerprint());
}

DomainCode encode_domain(const Tensor& image, AutoEncoder& dpg, const std::string& fingerprint) {
    Tensor code = dpg.encode(image, StatsMode::Running);
    // squeeze the batch axis: (1, C, *sp) -> (C, *sp)
    Shape s(code.shape.begin() + 1, code.shape.end());
    DomainCode dc;
    dc.values = Tensor(s, std::move(code.data));
    dc.source_fingerprint = fingerprint;
    return dc;
}

}  // namespace adaseg
