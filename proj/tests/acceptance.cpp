// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exits nonzero if any fail.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "adaseg/baselines.hpp"
#include "adaseg/config.hpp"
#include "adaseg/infer.hpp"
#include "adaseg/optim.hpp"
#include "adaseg/train.hpp"
#include "gradcheck.hpp"

using namespace adaseg;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Desk-scale experiment preset (committed together with the calibration runs
// that produced the thresholds asserted below).
// ---------------------------------------------------------------------------
struct DeskPreset {
    Shape size{64, 64};
    long n_train = 200, n_test = 50;
    long num_classes = 2;
    std::uint64_t data_seed = 101;
    std::string target_preset = "strong";

    DPGConfig dpg_config() const {
        DPGConfig c;
        c.depth = 4;
        c.base_channels = 8;
        c.code_channels = 64;
        c.augmentation.gamma_range = {0.7, 1.5};
        c.augmentation.noise_std = 0.05;
        c.augmentation.blur_sigma_range = {0, 1.2};
        c.augmentation.flip_prob = 0.5;
        return c;
    }
    TrainConfig dpg_train() const {
        TrainConfig t;
        t.epochs = 20;
        t.lr_max = 1e-3;
        t.lr_min = 1e-4;
        t.batch_size = 8;
        t.seed = 11;
        return t;
    }
    ArchConfig arch(NormKind norm) const {
        ArchConfig a;
        a.base_channels = 8;
        a.num_classes = num_classes;
        a.norm = norm;
        a.code_channels = norm == NormKind::AdaBN ? 64 : 0;
        return a;
    }
    TrainConfig seg_train(std::uint64_t seed) const {
        TrainConfig t;
        t.epochs = 18;
        t.lr_max = 1e-3;
        t.lr_min = 1e-4;
        t.batch_size = 8;
        t.seed = seed;
        return t;
    }
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------
class Criterion {
public:
    explicit Criterion(std::string name) : name_(std::move(name)) {}
    void expect(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
    }
    void info(const std::string& line) { notes_.push_back(line); }
    bool passed() const { return failures_.empty(); }
    const std::string& name() const { return name_; }
    const std::vector<std::string>& failures() const { return failures_; }
    const std::vector<std::string>& notes() const { return notes_; }

private:
    std::string name_;
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

int g_failed = 0;

void run_criterion(int id, const std::string& name, const std::function<void(Criterion&)>& fn) {
    Criterion c(name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fn(c);
    } catch (const std::exception& e) {
        c.expect(false, std::string("unhandled exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& n : c.notes()) std::cout << "         " << n << "\n";
    std::cout << (c.passed() ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << name
              << "  (" << std::fixed << secs << "s)\n";
    std::cout.unsetf(std::ios_base::floatfield);
    for (const auto& f : c.failures()) std::cout << "       - " << f << "\n";
    if (!c.passed()) ++g_failed;
}

fs::path work_dir() {
    const char* env = std::getenv("ADASEG_ACCEPT_DIR");
    fs::path p = env ? fs::path(env) : fs::temp_directory_path() / "adaseg_acceptance";
    fs::create_directories(p);
    return p;
}

std::vector<float> weights_f32(const Checkpoint& c) {
    std::vector<float> out;
    for (const auto& [n, t] : c.tensors)
        for (real v : t.data) out.push_back(static_cast<float>(v));
    return out;
}

std::vector<TestInstance> split_instances(const DatasetManifest& m, const std::string& split,
                                          std::size_t limit = 0) {
    std::vector<TestInstance> out;
    for (const auto& e : m.split(split)) {
        TestInstance inst;
        inst.image = load_image(m, e);
        inst.instance_id = fs::path(e.image).stem().string();
        if (!e.mask.empty()) inst.mask = load_mask(m, e);
        out.push_back(std::move(inst));
        if (limit && out.size() == limit) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared heavy artifacts (built once, reused by criteria 4-6)
// ---------------------------------------------------------------------------
struct Experiment {
    DeskPreset preset;
    DatasetManifest source, target;
    std::vector<DatasetManifest> corpus;
    Checkpoint dpg;
    Checkpoint untrained_dpg;

    struct SeedRun {
        Checkpoint plain, adaptive;
        real source_dice = 0, direct_target_dice = 0, adaptive_target_dice = 0;
    };
    std::vector<SeedRun> runs;
};

Experiment* g_exp = nullptr;

Experiment& experiment() {
    if (g_exp) return *g_exp;
    static Experiment e;
    const auto dir = work_dir() / "experiment";
    fs::remove_all(dir);
    const DeskPreset& P = e.preset;

    std::cout << "  [setup] generating datasets...\n";
    e.source = synth_base_dataset(dir / "source", P.n_train, P.n_test, P.size, P.num_classes,
                                  P.data_seed, "synthetic/source");
    e.target = apply_domain_shift(e.source, shift_presets().at(P.target_preset),
                                  mix_seed(P.data_seed, 0x7A66),
                                  "synthetic/target-" + P.target_preset, dir / "target");
    const char* corpus_presets[3] = {"identity", "mild", "strong"};
    for (int i = 0; i < 3; ++i) {
        auto base = synth_base_dataset(dir / ("corpus_base_" + std::to_string(i)), 50, 10, P.size,
                                       P.num_classes, mix_seed(P.data_seed, 0xC0 + i),
                                       "synthetic/corpus-base");
        e.corpus.push_back(apply_domain_shift(base, shift_presets().at(corpus_presets[i]),
                                              mix_seed(P.data_seed, 0xD0 + i),
                                              std::string("synthetic/corpus-") +
                                                  corpus_presets[i],
                                              dir / ("corpus_" + std::to_string(i))));
    }

    std::cout << "  [setup] pretraining DPG...\n";
    {
        AutoEncoder fresh(P.dpg_config());
        fresh.init(P.dpg_train().seed);
        e.untrained_dpg = snapshot_autoencoder(fresh, {});
    }
    e.dpg = pretrain_dpg(e.corpus, P.dpg_config(), P.dpg_train());

    for (std::uint64_t seed : P.seeds) {
        std::cout << "  [setup] training plain + adaptive UNet, seed " << seed << "...\n";
        Experiment::SeedRun run;
        Checkpoint plain_init = build_model(P.arch(NormKind::BN), seed);
        run.plain = train_plain(plain_init, e.source, P.seg_train(seed));

        Checkpoint ada_init = build_model(P.arch(NormKind::AdaBN), seed);
        ada_init.dpg_fingerprint = e.dpg.fingerprint();
        run.adaptive = train_source(ada_init, e.dpg, e.source, P.seg_train(seed));

        auto source_test = split_instances(e.source, "test");
        auto target_test = split_instances(e.target, "test");
        run.source_dice = direct_test(run.plain, source_test).mean_dice;
        run.direct_target_dice = direct_test(run.plain, target_test).mean_dice;
        run.adaptive_target_dice = episodic_eval(run.adaptive, e.dpg, target_test).mean_dice;
        std::cout << "  [setup] seed " << seed << ": source " << run.source_dice << ", direct "
                  << run.direct_target_dice << ", adaptive " << run.adaptive_target_dice << "\n";
        e.runs.push_back(std::move(run));
    }
    g_exp = &e;
    return e;
}

// ===========================================================================
// Criteria
// ===========================================================================

void criterion1_normalization(Criterion& c) {
    const real tol = 1e-10;
    {
        Tensor x({1, 1, 2, 1}, {0, 2});
        Tensor g1({1}, {real(1)}), b0({1}, {real(0)});
        Tensor z = batch_norm(x, g1, b0, 0, StatsMode::Batch);
        c.expect(std::abs(z[0] + 1) < tol && std::abs(z[1] - 1) < tol,
                 "batch_norm [0,2] -> [-1,1] exact");
        Tensor g3({1}, {real(3)}), b5({1}, {real(5)});
        Tensor z2 = batch_norm(x, g3, b5, 0, StatsMode::Batch);
        c.expect(std::abs(z2[0] - 2) < tol && std::abs(z2[1] - 8) < tol,
                 "batch_norm gamma=3 beta=5 -> [2,8] exact");
    }
    {
        Tensor x({1, 1, 2, 1}, {0, 2});
        Tensor y({1, 1, 2, 1}, {1, 5});
        Tensor z = ada_in(x, y);
        c.expect(std::abs(z[0] - 1) < tol && std::abs(z[1] - 5) < tol,
                 "ada_in [0,2]x[1,5] -> [1,5] exact");
        Tensor self = ada_in(x, x);
        c.expect(std::abs(self[0] - x[0]) < tol && std::abs(self[1] - x[1]) < tol,
                 "ada_in self-alignment identity");
    }
    {
        AdaBNState st;
        st.gamma = Tensor({1}, {real(1)});
        st.beta = Tensor({1});
        st.code_projection = Tensor({1, 1}, {real(1)});
        st.epsilon = 1e-5;
        DomainCode code;
        code.values = Tensor({1, 2, 1}, {1, 5});
        ChannelStats cs = code_stats(code, st);
        c.expect(std::abs(cs.mean[0] - 3) < tol && std::abs(cs.std[0] - 2) < tol,
                 "code_stats [1,5] -> mean 3 std 2 exact");
        DomainCode flat;
        flat.values = Tensor({1, 3, 1}, {real(0.4), real(0.4), real(0.4)});
        ChannelStats cf = code_stats(flat, st);
        c.expect(std::abs(cf.std[0] - 1e-5) < tol, "constant code floors std at eps");

        st.epsilon = 0;
        Tensor x({1, 1, 2, 1}, {0, 2});
        Tensor z = ada_bn_forward(x, code, st, StatsMode::Instance);
        c.expect(std::abs(z[0] - 1) < tol && std::abs(z[1] - 5) < tol,
                 "ada_bn [0,2] with muY=3 sgY=2 -> [1,5] exact");
        st.gamma[0] = 2;
        st.beta[0] = 1;
        Tensor z2 = ada_bn_forward(x, code, st, StatsMode::Instance);
        c.expect(std::abs(z2[0] - 3) < tol && std::abs(z2[1] - 11) < tol,
                 "ada_bn gamma=2 beta=1 -> [3,11] exact");
    }
    {
        // Eq. 3 reduces to Eq. 1 when mu(Y)=0, sigma(Y)=1
        auto x = gradcheck::random_tensor({2, 2, 4, 4}, 1);
        DomainCode code;
        code.values = Tensor({2, 2, 1}, {-1, 1, -1, 1});
        AdaBNState st;
        st.gamma = Tensor({2}, real(1));
        st.beta = Tensor({2});
        st.code_projection = Tensor({2, 2});
        st.code_projection[0] = 1;
        st.code_projection[3] = 1;
        st.epsilon = 0;
        Tensor z = ada_bn_forward(x, code, st, StatsMode::Batch);
        Tensor bn = batch_norm(x, st.gamma, st.beta, 0, StatsMode::Batch);
        real maxd = 0;
        for (long i = 0; i < z.numel(); ++i) maxd = std::max(maxd, std::abs(z[i] - bn[i]));
        c.expect(maxd < tol, "Eq.3 reduces to Eq.1 at muY=0 sgY=1");
    }
    {
        // gamma=1 beta=0 instance mode: output stats match code stats within 1e-5
        auto x = gradcheck::random_tensor({1, 3, 8, 8}, 2);
        DomainCode code;
        code.values = gradcheck::random_tensor({4, 3, 3}, 3, -1, 2);
        AdaBNState st;
        st.gamma = Tensor({3}, real(1));
        st.beta = Tensor({3});
        st.code_projection = gradcheck::random_tensor({3, 4}, 4);
        st.epsilon = 1e-10;
        ChannelStats target = code_stats(code, st);
        Tensor z = ada_bn_forward(x, code, st, StatsMode::Instance);
        bool ok = true;
        for (long ch = 0; ch < 3; ++ch) {
            real m = 0, v = 0;
            for (long i = 0; i < 64; ++i) m += z[ch * 64 + i];
            m /= 64;
            for (long i = 0; i < 64; ++i) v += (z[ch * 64 + i] - m) * (z[ch * 64 + i] - m);
            ok = ok && std::abs(m - target.mean[ch]) < 1e-5 &&
                 std::abs(std::sqrt(v / 64) - target.std[ch]) < 1e-5;
        }
        c.expect(ok, "ada_bn output statistics match code_stats within 1e-5");
    }
}

void criterion2_gradients(Criterion& c) {
    {  // AdaBN layer: X, gamma, beta, projection
        auto x = gradcheck::random_tensor({2, 3, 4, 4}, 51);
        Tensor code_a = gradcheck::random_tensor({5, 2, 2}, 52);
        Tensor code_b = gradcheck::random_tensor({5, 2, 2}, 53);
        auto wts = gradcheck::random_tensor({2, 3, 4, 4}, 54);
        nn::AdaBN layer(3, 5);
        layer.gamma = gradcheck::random_tensor({3}, 55, 0.5, 1.5);
        layer.beta = gradcheck::random_tensor({3}, 56);
        layer.proj = gradcheck::random_tensor({3, 5}, 57);
        std::vector<const Tensor*> codes{&code_a, &code_b};
        for (auto mode : {StatsMode::Batch, StatsMode::Instance}) {
            auto loss = [&]() {
                Tensor y = layer.forward(x, codes, mode, false, nullptr);
                real acc = 0;
                for (long i = 0; i < y.numel(); ++i) acc += wts[i] * y[i];
                return acc;
            };
            nn::AdaBN::Cache cache;
            layer.forward(x, codes, mode, false, &cache);
            layer.zero_grad();
            Tensor dx = layer.backward(wts, cache);
            const std::string m = stats_mode_name(mode);
            c.expect(gradcheck::check(loss, x, dx, 40).max_rel_err < 1e-4,
                     "AdaBN dX gradcheck (" + m + ")");
            c.expect(gradcheck::check(loss, layer.gamma, layer.dgamma).max_rel_err < 1e-4,
                     "AdaBN dgamma gradcheck (" + m + ")");
            c.expect(gradcheck::check(loss, layer.beta, layer.dbeta).max_rel_err < 1e-4,
                     "AdaBN dbeta gradcheck (" + m + ")");
            c.expect(gradcheck::check(loss, layer.proj, layer.dproj).max_rel_err < 1e-4,
                     "AdaBN dproj gradcheck (" + m + ")");
        }
    }
    {  // losses on random 8x8 inputs
        auto logits = gradcheck::random_tensor({2, 2, 8, 8}, 61, -2, 2);
        Tensor target({2, 2, 8, 8});
        for (long b = 0; b < 2; ++b)
            for (long i = 0; i < 64; ++i) {
                const bool fg = ((i * 7 + b) % 5) == 0;
                target[(b * 2 + 1) * 64 + i] = fg;
                target[(b * 2 + 0) * 64 + i] = !fg;
            }
        auto bl = [&]() { return bce_loss(logits, target); };
        c.expect(gradcheck::check(bl, logits, bce_loss_grad(logits, target)).max_rel_err < 1e-4,
                 "BCE gradcheck");
        auto probs = gradcheck::random_tensor({2, 2, 8, 8}, 62, 0.05, 0.95);
        auto dl = [&]() { return dice_loss(probs, target, 1e-6); };
        c.expect(gradcheck::check(dl, probs, dice_loss_grad(probs, target, 1e-6)).max_rel_err <
                     1e-4,
                 "Dice gradcheck");
        auto cl = [&]() { return combined_loss(logits, target, 1.0, 1e-6); };
        c.expect(gradcheck::check(cl, logits, combined_loss_grad(logits, target, 1.0, 1e-6))
                         .max_rel_err < 1e-4,
                 "combined loss gradcheck");
    }
    {  // full model forward on 16x16
        ArchConfig cfg;
        cfg.base_channels = 2;
        cfg.num_classes = 2;
        cfg.norm = NormKind::AdaBN;
        cfg.code_channels = 4;
        UNet net = make_unet(build_model(cfg, 71));
        auto x = gradcheck::random_tensor({1, 1, 16, 16}, 72, 0, 1);
        auto code = gradcheck::random_tensor({4, 2, 2}, 73);
        ByteTensor mask({1, 16, 16});
        for (long i = 0; i < 256; ++i) mask.data[static_cast<std::size_t>(i)] = (i % 5) == 0;
        Tensor target = one_hot(mask, 2);
        auto loss = [&]() {
            Tensor logits = net.forward(x, {&code}, StatsMode::Batch, false, nullptr);
            return combined_loss(logits, target, 1.0, 1e-6);
        };
        UNet::Tape tape;
        Tensor logits = net.forward(x, {&code}, StatsMode::Batch, false, &tape);
        net.zero_grad();
        net.backward(combined_loss_grad(logits, target, 1.0, 1e-6), tape);
        double worst = 0;
        for (auto& p : net.params()) {
            if (!p.trainable) continue;
            worst = std::max(worst, gradcheck::check(loss, *p.value, *p.grad, 4, 1e-5,
                                                     fnv1a(p.name.data(), p.name.size()))
                                        .max_rel_err);
        }
        c.info("full-model worst gradient rel err: " + std::to_string(worst));
        c.expect(worst < 1e-3, "full 16x16 forward gradcheck < 1e-3");
    }
}

void criterion3_episodic(Criterion& c) {
    // 100-instance synthetic test set through an adaptive model
    const auto dir = work_dir() / "episodic";
    fs::remove_all(dir);
    auto data = synth_base_dataset(dir, 2, 100, {32, 32}, 2, 311);

    DPGConfig dcfg;
    dcfg.depth = 3;
    dcfg.base_channels = 4;
    dcfg.code_channels = 16;
    AutoEncoder ae(dcfg);
    ae.init(31);
    Checkpoint dpg = snapshot_autoencoder(ae, {});

    ArchConfig arch;
    arch.base_channels = 4;
    arch.num_classes = 2;
    arch.norm = NormKind::AdaBN;
    arch.code_channels = 16;
    Checkpoint model = build_model(arch, 32);
    model.dpg_fingerprint = dpg.fingerprint();

    auto instances = split_instances(data, "test");
    c.expect(instances.size() == 100, "built 100 test instances");

    const auto model_bytes = weights_f32(model);
    const auto dpg_bytes = weights_f32(dpg);
    const auto grad_ops = grad_op_count();

    DiceReport base = episodic_eval(model, dpg, instances);
    c.expect(weights_f32(model) == model_bytes, "(a) model weight bytes identical");
    c.expect(weights_f32(dpg) == dpg_bytes, "(a) dpg weight bytes identical");

    bool invariant = true;
    std::mt19937_64 rng(33);
    for (int p = 0; p < 5; ++p) {
        auto shuffled = instances;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        DiceReport rep = episodic_eval(model, dpg, shuffled);
        invariant = invariant && rep.per_instance == base.per_instance &&
                    rep.per_class_mean == base.per_class_mean;
    }
    c.expect(invariant, "(b) results invariant under 5 random permutations");
    c.expect(grad_op_count() == grad_ops, "(c) no gradient machinery on the inference path");
}

void criterion4_domain_shift(Criterion& c) {
    Experiment& e = experiment();
    real src = 0, direct = 0, adaptive = 0;
    for (const auto& run : e.runs) {
        src += run.source_dice;
        direct += run.direct_target_dice;
        adaptive += run.adaptive_target_dice;
    }
    src /= static_cast<real>(e.runs.size());
    direct /= static_cast<real>(e.runs.size());
    adaptive /= static_cast<real>(e.runs.size());
    std::ostringstream os;
    os << "mean over seeds: source " << src << ", direct target " << direct
       << ", adaptive target " << adaptive;
    c.info(os.str());

    c.expect(src - direct >= 0.10,
             "(a) direct-test target Dice drops >= 0.10 below source-test Dice");
    c.expect(adaptive >= direct + 0.02, "(b) adaptive mean target Dice >= direct + 0.02");

    // recorded desk-scale oracle values from the training-module examples:
    // final train Dice of the adaptive model, and instance-vs-batch stats
    // consistency on source images
    auto train_subset = split_instances(e.source, "train", 50);
    DiceReport episodic_train = episodic_eval(e.runs[0].adaptive, e.dpg, train_subset);
    c.info("adaptive train-split episodic Dice (seed 1): " +
           std::to_string(episodic_train.mean_dice));
    c.expect(episodic_train.mean_dice > 0.85, "train Dice > 0.85 on the desk config");

    // batch-stats evaluation over the same images through the same model
    UNet net = make_unet(e.runs[0].adaptive);
    AutoEncoder ae = make_autoencoder(e.dpg);
    const std::string fp = e.dpg.fingerprint();
    std::vector<std::pair<std::string, ByteTensor>> preds;
    std::vector<ByteTensor> gts;
    const long bs = 8;
    for (std::size_t start = 0; start < train_subset.size();
         start += static_cast<std::size_t>(bs)) {
        const std::size_t bend = std::min(train_subset.size(), start + static_cast<std::size_t>(bs));
        std::vector<Tensor> images;
        std::vector<Tensor> codes;
        std::vector<const Tensor*> code_ptrs;
        for (std::size_t i = start; i < bend; ++i) {
            images.push_back(train_subset[i].image);
            codes.push_back(encode_domain(train_subset[i].image, ae, fp).values);
        }
        for (const auto& cd : codes) code_ptrs.push_back(&cd);
        Tensor logits = net.forward(stack_images(images), code_ptrs, StatsMode::Batch, false,
                                    nullptr);
        Shape sp(logits.shape.begin() + 2, logits.shape.end());
        const long s = numel_of(sp);
        for (std::size_t i = start; i < bend; ++i) {
            ByteTensor mask(sp);
            const real* fg = logits.ptr() + ((static_cast<long>(i - start)) * 2 + 1) * s;
            for (long p = 0; p < s; ++p) mask.data[static_cast<std::size_t>(p)] = fg[p] > 0;
            preds.emplace_back(train_subset[i].instance_id, std::move(mask));
            gts.push_back(*train_subset[i].mask);
        }
    }
    DiceReport batch_eval = score_predictions(preds, gts, 2, "train-mode", {});
    std::ostringstream os2;
    os2 << "instance-stats vs batch-stats train Dice: " << episodic_train.mean_dice << " vs "
        << batch_eval.mean_dice;
    c.info(os2.str());
    c.expect(std::abs(episodic_train.mean_dice - batch_eval.mean_dice) <= 0.02,
             "episodic Dice within 0.02 of training-mode evaluation");
}

void criterion5_tent(Criterion& c) {
    Experiment& e = experiment();
    auto target_test = split_instances(e.target, "test");
    const Checkpoint& plain = e.runs[0].plain;

    TentConfig cfg;
    cfg.shots = 1;
    cfg.lr = 1e-3;
    cfg.batch_size = 8;

    const real before = mean_test_entropy(plain, target_test, cfg.batch_size);
    auto [adapted, rep] = tent_adapt(plain, target_test, cfg);
    const real after = mean_test_entropy(adapted, target_test, cfg.batch_size);
    std::ostringstream os;
    os << "mean prediction entropy: " << before << " -> " << after << " (dice " << rep.mean_dice
       << ")";
    c.info(os.str());
    c.expect(after < before, "one-shot adaptation strictly decreases mean entropy");

    bool only_affine = true;
    for (std::size_t i = 0; i < adapted.tensors.size(); ++i) {
        const auto& [name, after_t] = adapted.tensors[i];
        const bool is_affine = name.find(".gamma") != std::string::npos ||
                               name.find(".beta") != std::string::npos;
        if (!is_affine && after_t.data != plain.tensors[i].second.data) only_affine = false;
    }
    c.expect(only_affine, "only BN affine parameters changed");

    TentConfig zero = cfg;
    zero.lr = 0;
    auto [same, zrep] = tent_adapt(plain, target_test, zero);
    DiceReport ref = batchstats_test(plain, target_test, zero.batch_size);
    c.expect(zrep.per_instance == ref.per_instance,
             "lr=0 reduction equals batch-stats direct testing bitwise");
    c.expect(same.fingerprint() == plain.fingerprint(), "lr=0 leaves every tensor unchanged");
}

void criterion6_dpg(Criterion& c) {
    Experiment& e = experiment();

    // held-out reconstruction MSE vs the untrained baseline, same protocol
    auto recon_mse = [&](const Checkpoint& ckpt) {
        AutoEncoder ae = make_autoencoder(ckpt);
        real total = 0;
        long n = 0;
        for (const auto& m : e.corpus) {
            for (const auto& entry : m.test) {
                Tensor clean = load_image(m, entry);
                Tensor corrupted = augment(clean, e.preset.dpg_config().augmentation,
                                           mix_seed(4242, n));
                Shape bs = corrupted.shape;
                bs.insert(bs.begin(), 1);
                Tensor x(bs, corrupted.data);
                Tensor target(bs, clean.data);
                Tensor recon = ae.forward(x, StatsMode::Running, false, nullptr);
                total += mse_loss(recon, target);
                ++n;
            }
        }
        return total / static_cast<real>(n);
    };
    const real untrained = recon_mse(e.untrained_dpg);
    const real trained = recon_mse(e.dpg);
    std::ostringstream os;
    os << "held-out reconstruction MSE: untrained " << untrained << ", trained " << trained;
    c.info(os.str());
    c.expect(trained < 0.2 * untrained, "trained MSE < 0.2 x untrained baseline");

    // code-distance separation over the 3 corpus domains
    AutoEncoder ae = make_autoencoder(e.dpg);
    const std::string fp = e.dpg.fingerprint();
    std::vector<std::vector<Tensor>> codes;
    for (const auto& m : e.corpus) {
        std::vector<Tensor> domain_codes;
        for (const auto& entry : m.test)
            domain_codes.push_back(encode_domain(load_image(m, entry), ae, fp).values);
        codes.push_back(std::move(domain_codes));
    }
    auto l2 = [](const Tensor& a, const Tensor& b) {
        real acc = 0;
        for (long i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(acc);
    };
    real intra = 0, inter = 0;
    long n_intra = 0, n_inter = 0;
    for (std::size_t d1 = 0; d1 < codes.size(); ++d1)
        for (std::size_t d2 = d1; d2 < codes.size(); ++d2)
            for (std::size_t i = 0; i < codes[d1].size(); ++i)
                for (std::size_t j = (d1 == d2 ? i + 1 : 0); j < codes[d2].size(); ++j) {
                    const real dist = l2(codes[d1][i], codes[d2][j]);
                    if (d1 == d2) {
                        intra += dist;
                        ++n_intra;
                    } else {
                        inter += dist;
                        ++n_inter;
                    }
                }
    intra /= static_cast<real>(n_intra);
    inter /= static_cast<real>(n_inter);
    std::ostringstream os2;
    os2 << "code distance: intra " << intra << ", inter " << inter;
    c.info(os2.str());
    c.expect(intra < inter, "intra-domain code distance < inter-domain on average");

    // encode_domain never alters checkpoint weights
    const auto bytes = weights_f32(e.dpg);
    encode_domain(load_image(e.corpus[0], e.corpus[0].test[0]), e.dpg);
    c.expect(weights_f32(e.dpg) == bytes, "encode_domain leaves weights byte-identical");
}

void criterion7_dice_oracle(Criterion& c) {
    auto dice_bruteforce = [](const ByteTensor& a, const ByteTensor& b, int cls) {
        std::set<long> pa, pb;
        for (long i = 0; i < a.numel(); ++i) {
            if (a.data[static_cast<std::size_t>(i)] == cls) pa.insert(i);
            if (b.data[static_cast<std::size_t>(i)] == cls) pb.insert(i);
        }
        if (pa.empty() && pb.empty()) return 1.0;
        long inter = 0;
        for (long i : pa) inter += pb.count(i);
        return 2.0 * inter / static_cast<double>(pa.size() + pb.size());
    };
    auto random_mask = [](const Shape& s, int labels, std::uint64_t seed) {
        ByteTensor m(s);
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dist(0, labels - 1);
        for (auto& v : m.data) v = static_cast<std::uint8_t>(dist(rng));
        return m;
    };

    bool exact = true;
    for (int trial = 0; trial < 1000; ++trial) {
        ByteTensor a = random_mask({7, 9}, 3, 10000 + trial);
        ByteTensor b = random_mask({7, 9}, 3, 20000 + trial);
        for (int cls = 0; cls < 3; ++cls)
            exact = exact && dice_score(a, b, cls) == dice_bruteforce(a, b, cls);
    }
    c.expect(exact, "dice_score matches brute force on 1000 random pairs exactly");

    RegionSpec spec;
    spec.regions = {{"WT", {1, 2, 3}}, {"TC", {1, 3}}, {"ET", {3}}};
    bool regions_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        ByteTensor a = random_mask({6, 6, 6}, 4, 30000 + trial);
        ByteTensor b = random_mask({6, 6, 6}, 4, 40000 + trial);
        auto scores = region_dice(a, b, spec, 4);
        for (const auto& [name, labels] : spec.regions) {
            ByteTensor ba({6, 6, 6}), bb({6, 6, 6});
            for (long i = 0; i < a.numel(); ++i) {
                ba.data[static_cast<std::size_t>(i)] =
                    std::count(labels.begin(), labels.end(),
                               a.data[static_cast<std::size_t>(i)]) > 0;
                bb.data[static_cast<std::size_t>(i)] =
                    std::count(labels.begin(), labels.end(),
                               b.data[static_cast<std::size_t>(i)]) > 0;
            }
            regions_ok = regions_ok && scores[name] == dice_bruteforce(ba, bb, 1);
        }
    }
    c.expect(regions_ok, "region_dice matches per-region brute force on random volumes");
}

void criterion8_shapes_formats(Criterion& c) {
    {  // logits shape contracts
        ArchConfig a2;
        a2.base_channels = 2;
        a2.num_classes = 2;
        a2.norm = NormKind::AdaBN;
        a2.code_channels = 4;
        UNet net2 = make_unet(build_model(a2, 81));
        auto x2 = gradcheck::random_tensor({1, 1, 64, 64}, 82, 0, 1);
        auto code2 = gradcheck::random_tensor({4, 4, 4}, 83);
        c.expect(net2.forward(x2, {&code2}, StatsMode::Instance, false, nullptr).shape ==
                     Shape{1, 2, 64, 64},
                 "2D logits (1,1,64,64) -> (1,2,64,64)");

        ArchConfig a3;
        a3.dimensionality = 3;
        a3.base_channels = 2;
        a3.num_classes = 4;
        a3.norm = NormKind::AdaBN;
        a3.code_channels = 4;
        UNet net3 = make_unet(build_model(a3, 84));
        auto x3 = gradcheck::random_tensor({1, 1, 32, 32, 32}, 85, 0, 1);
        auto code3 = gradcheck::random_tensor({4, 2, 2, 2}, 86);
        c.expect(net3.forward(x3, {&code3}, StatsMode::Instance, false, nullptr).shape ==
                     Shape{1, 4, 32, 32, 32},
                 "3D logits (1,1,32,32,32) -> (1,4,32,32,32)");
    }
    {  // checkpoint round trip
        const auto dir = work_dir() / "roundtrip_ckpt";
        fs::remove_all(dir);
        ArchConfig a;
        a.base_channels = 2;
        a.num_classes = 2;
        a.norm = NormKind::AdaBN;
        a.code_channels = 4;
        Checkpoint ckpt = build_model(a, 87);
        save_checkpoint(dir, ckpt);
        Checkpoint back = load_checkpoint(dir);
        c.expect(back.fingerprint() == ckpt.fingerprint() &&
                     weights_f32(back) == weights_f32(ckpt),
                 "checkpoint round trip is lossless");
    }
    {  // dataset round trip
        const auto dir = work_dir() / "roundtrip_data";
        fs::remove_all(dir);
        auto m = synth_base_dataset(dir, 2, 1, {32, 32}, 2, 88);
        auto loaded = load_dataset(dir);
        bool ok = loaded.num_classes == m.num_classes && loaded.train.size() == m.train.size();
        for (std::size_t i = 0; ok && i < m.train.size(); ++i) {
            ok = load_image(m, m.train[i]).data == load_image(loaded, loaded.train[i]).data &&
                 load_mask(m, m.train[i]).data == load_mask(loaded, loaded.train[i]).data;
        }
        c.expect(ok, "dataset round trip is lossless");
    }
    {  // end-to-end CLI pipeline from an empty directory
        const char* cli = std::getenv("ADASEG_CLI");
        if (!cli) {
            c.expect(false, "ADASEG_CLI not set (run through ctest)");
            return;
        }
        const auto dir = work_dir() / "cli";
        fs::remove_all(dir);
        fs::create_directories(dir);
        nlohmann::json j;
        j["experiment_name"] = "acceptance-e2e";
        j["seed"] = 5;
        j["output_dir"] = (dir / "run").string();
        j["synth"] = {{"n_train", 10}, {"n_test", 5}, {"size", {32, 32}}, {"num_classes", 2},
                      {"target_shift", "strong"},
                      {"corpus", {{"n_train", 6}, {"n_test", 2}, {"domains", {"identity", "mild"}}}}};
        j["arch"] = {{"base_channels", 2}, {"num_classes", 2}};
        j["dpg"] = {{"depth", 2}, {"base_channels", 2}, {"code_channels", 4}};
        j["train"] = {{"epochs", 2}, {"lr_max", 1e-3}, {"lr_min", 1e-4}, {"batch_size", 4}};
        std::ofstream(dir / "config.json") << j.dump();

        auto run = [&](const std::string& args) {
            const std::string cmd = std::string(cli) + " --config " +
                                    (dir / "config.json").string() + " " + args +
                                    " >/dev/null 2>&1";
            return WEXITSTATUS(std::system(cmd.c_str()));
        };
        bool ok = run("synth") == 0 && run("pretrain-dpg") == 0 &&
                  run("train --norm adabn") == 0 && run("train --norm bn") == 0 &&
                  run("adapt") == 0 && run("baseline --method direct") == 0 &&
                  run("baseline --method tent --shots 1") == 0;
        if (ok) {
            const std::string runs = (dir / "run/baseline_direct_target").string() + " " +
                                     (dir / "run/adapt_target").string();
            ok = run("report " + runs) == 0 && fs::exists(dir / "run/comparison.md");
        }
        c.expect(ok, "synth -> pretrain-dpg -> train -> adapt -> baseline -> report, exit 0");
    }
}

}  // namespace

int main() {
    std::cout << "=== acceptance suite ===\n";
    run_criterion(1, "normalization correctness", criterion1_normalization);
    run_criterion(2, "gradient suite", criterion2_gradients);
    run_criterion(3, "episodic/zero-shot contract", criterion3_episodic);
    run_criterion(7, "dice oracle equivalence", criterion7_dice_oracle);
    run_criterion(8, "shape/format suite", criterion8_shapes_formats);
    run_criterion(4, "synthetic domain-shift experiment", criterion4_domain_shift);
    run_criterion(5, "TENT baseline behavior", criterion5_tent);
    run_criterion(6, "DPG properties", criterion6_dpg);
    std::cout << (g_failed == 0 ? "ALL CRITERIA PASSED\n"
                                : std::to_string(g_failed) + " CRITERIA FAILED\n");
    return g_failed == 0 ? 0 : 1;
}
