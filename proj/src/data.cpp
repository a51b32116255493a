#include "adaseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "adaseg/arrio.hpp"
#include "adaseg/common.hpp"

namespace adaseg {

namespace fs = std::filesystem;

const std::vector<PairEntry>& DatasetManifest::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw validation_error("unknown split '" + name + "'");
}

void ShiftSpec::validate() const {
    if (gamma <= 0) throw validation_error("shift: gamma must be positive");
    if (contrast_scale < 0) throw validation_error("shift: contrast_scale must be >= 0");
    if (blur_sigma < 0 || noise_std < 0)
        throw validation_error("shift: blur_sigma and noise_std must be >= 0");
    if (downsample_factor < 1) throw validation_error("shift: downsample_factor must be >= 1");
}

// ============================================================================
// Small image utilities (single-channel planes, 2d or 3d)
// ============================================================================

namespace {

std::vector<long> spatial_of(const Tensor& image) {
    if (image.ndim() < 2)
        throw shape_error("expected (channels, *spatial) image, got " + shape_str(image.shape));
    return std::vector<long>(image.shape.begin() + 1, image.shape.end());
}

void gaussian_blur_axis(std::vector<real>& buf, std::vector<real>& tmp,
                        const std::vector<long>& sp, int axis, real sigma) {
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

    // strides for the axis walk
    const int nd = static_cast<int>(sp.size());
    std::vector<long> strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i) strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i + 1)] * sp[static_cast<std::size_t>(i + 1)];
    const long n = sp[static_cast<std::size_t>(axis)];
    const long stride = strides[static_cast<std::size_t>(axis)];
    const long total = static_cast<long>(buf.size());
    tmp = buf;
    for (long base = 0; base < total; ++base) {
        const long pos = (base / stride) % n;
        real acc = 0;
        for (int k = -radius; k <= radius; ++k) {
            long p = std::clamp<long>(pos + k, 0, n - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[base + (p - pos) * stride];
        }
        buf[static_cast<std::size_t>(base)] = acc;
    }
}

void gaussian_blur(Tensor& image, real sigma) {
    if (sigma <= 0) return;
    const auto sp = spatial_of(image);
    const long s = numel_of(Shape(sp.begin(), sp.end()));
    std::vector<real> tmp;
    for (long c = 0; c < image.dim(0); ++c) {
        std::vector<real> plane(image.data.begin() + c * s, image.data.begin() + (c + 1) * s);
        for (int a = 0; a < static_cast<int>(sp.size()); ++a)
            gaussian_blur_axis(plane, tmp, sp, a, sigma);
        std::copy(plane.begin(), plane.end(), image.data.begin() + c * s);
    }
}

// Separable linear resize (align_corners = false) of one channel plane.
std::vector<real> resize_plane(const std::vector<real>& in, const std::vector<long>& sp_in,
                               const std::vector<long>& sp_out) {
    std::vector<real> cur = in;
    std::vector<long> sp = sp_in;
    for (int axis = 0; axis < static_cast<int>(sp.size()); ++axis) {
        if (sp[static_cast<std::size_t>(axis)] == sp_out[static_cast<std::size_t>(axis)]) continue;
        const long n_in = sp[static_cast<std::size_t>(axis)];
        const long n_out = sp_out[static_cast<std::size_t>(axis)];
        std::vector<long> nsp = sp;
        nsp[static_cast<std::size_t>(axis)] = n_out;
        const long total_out = numel_of(Shape(nsp.begin(), nsp.end()));
        std::vector<real> next(static_cast<std::size_t>(total_out));

        const int nd = static_cast<int>(sp.size());
        std::vector<long> strides_in(static_cast<std::size_t>(nd), 1),
            strides_out(static_cast<std::size_t>(nd), 1);
        for (int i = nd - 2; i >= 0; --i) {
            strides_in[static_cast<std::size_t>(i)] =
                strides_in[static_cast<std::size_t>(i + 1)] * sp[static_cast<std::size_t>(i + 1)];
            strides_out[static_cast<std::size_t>(i)] =
                strides_out[static_cast<std::size_t>(i + 1)] *
                nsp[static_cast<std::size_t>(i + 1)];
        }
        const real scale = static_cast<real>(n_in) / static_cast<real>(n_out);
        for (long o = 0; o < total_out; ++o) {
            // decompose o, swap the axis coordinate for the source coordinate
            long rem = o, in_base = 0, pos = 0;
            for (int i = 0; i < nd; ++i) {
                const long coord = rem / strides_out[static_cast<std::size_t>(i)];
                rem %= strides_out[static_cast<std::size_t>(i)];
                if (i == axis)
                    pos = coord;
                else
                    in_base += coord * strides_in[static_cast<std::size_t>(i)];
            }
            const real c = (static_cast<real>(pos) + real(0.5)) * scale - real(0.5);
            long i0 = static_cast<long>(std::floor(c));
            real w1 = c - static_cast<real>(i0);
            long i1 = i0 + 1;
            if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0; }
            if (i1 >= n_in) { i1 = n_in - 1; i0 = n_in - 1; w1 = 0; }
            const long st = strides_in[static_cast<std::size_t>(axis)];
            next[static_cast<std::size_t>(o)] =
                cur[static_cast<std::size_t>(in_base + i0 * st)] * (1 - w1) +
                cur[static_cast<std::size_t>(in_base + i1 * st)] * w1;
        }
        cur = std::move(next);
        sp = nsp;
    }
    return cur;
}

void clip01(Tensor& t) {
    for (auto& v : t.data) v = std::clamp(v, real(0), real(1));
}

}  // namespace

// ============================================================================
// Shift
// ============================================================================

Tensor shift_image(const Tensor& image, const ShiftSpec& spec, std::uint64_t seed) {
    spec.validate();
    Tensor out = image;
    // 1. gamma
    if (spec.gamma != real(1)) {
        for (auto& v : out.data) v = std::pow(std::max(v, real(0)), spec.gamma);
        clip01(out);
    }
    // 2. contrast about mid-gray
    if (spec.contrast_scale != real(1)) {
        for (auto& v : out.data) v = real(0.5) + (v - real(0.5)) * spec.contrast_scale;
        clip01(out);
    }
    // 3. blur
    if (spec.blur_sigma > 0) {
        gaussian_blur(out, spec.blur_sigma);
        clip01(out);
    }
    // 4. downsample then upsample back
    if (spec.downsample_factor > 1) {
        const auto sp = spatial_of(out);
        std::vector<long> sp_lo(sp.size());
        for (std::size_t i = 0; i < sp.size(); ++i)
            sp_lo[i] = std::max<long>(1, sp[i] / spec.downsample_factor);
        const long s = numel_of(Shape(sp.begin(), sp.end()));
        for (long c = 0; c < out.dim(0); ++c) {
            std::vector<real> plane(out.data.begin() + c * s, out.data.begin() + (c + 1) * s);
            auto lo = resize_plane(plane, sp, sp_lo);
            auto hi = resize_plane(lo, sp_lo, sp);
            std::copy(hi.begin(), hi.end(), out.data.begin() + c * s);
        }
        clip01(out);
    }
    // 5. noise
    if (spec.noise_std > 0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<real> dist(real(0), spec.noise_std);
        for (auto& v : out.data) v += dist(rng);
        clip01(out);
    }
    return out;
}

const std::map<std::string, ShiftSpec>& shift_presets() {
    // "strong" is calibrated so that a source-trained plain-BN UNet loses at
    // least 0.10 Dice on the shifted target (see tests/acceptance).
    static const std::map<std::string, ShiftSpec> presets = {
        {"identity", ShiftSpec{}},
        {"mild", ShiftSpec{1.4, 0.85, 0.4, 0.01, 1}},
        {"strong", ShiftSpec{2.6, 0.55, 0.8, 0.03, 1}},
    };
    return presets;
}

// ============================================================================
// Synthetic generator
// ============================================================================

namespace {

struct SynthSample {
    Tensor image;     // (1, *sp)
    ByteTensor mask;  // (*sp)
};

SynthSample synth_2d(const Shape& sp, long num_classes, std::mt19937_64& rng) {
    const long h = sp[0], w = sp[1];
    SynthSample s;
    s.image = Tensor({1, h, w});
    s.mask = ByteTensor({h, w});
    std::uniform_real_distribution<real> uni(0, 1);

    // smooth background: base level + linear gradient + a few soft blobs
    const real b0 = real(0.40) + real(0.20) * uni(rng);
    const real theta = 2 * M_PI * uni(rng);
    const real ga = real(-0.12) + real(0.24) * uni(rng);
    struct Blob {
        real cy, cx, amp, s2;
    };
    std::vector<Blob> blobs;
    for (int i = 0; i < 3; ++i) {
        Blob bl;
        bl.cy = uni(rng) * h;
        bl.cx = uni(rng) * w;
        bl.amp = real(-0.08) + real(0.16) * uni(rng);
        const real sg = (real(0.12) + real(0.2) * uni(rng)) * static_cast<real>(std::max(h, w));
        bl.s2 = sg * sg;
        blobs.push_back(bl);
    }
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            real v = b0 + ga * (std::cos(theta) * x + std::sin(theta) * y) /
                              static_cast<real>(std::max(h, w));
            for (const auto& bl : blobs) {
                const real dy = y - bl.cy, dx = x - bl.cx;
                v += bl.amp * std::exp(-(dy * dy + dx * dx) / (2 * bl.s2));
            }
            s.image[y * w + x] = v;
        }
    }

    // tubular structures: random smooth walks stamped as discs
    const int n_curves = 2 + static_cast<int>(uni(rng) * 3);  // 2..4
    for (int cv = 0; cv < n_curves; ++cv) {
        const std::uint8_t label =
            static_cast<std::uint8_t>(1 + (num_classes > 2 ? cv % (num_classes - 1) : 0));
        const real radius = real(1.0) + real(1.0) * uni(rng);
        // start on a random border, heading inward
        real py, px, ang;
        const int side = static_cast<int>(uni(rng) * 4);
        switch (side) {
            case 0: py = 0; px = uni(rng) * w; ang = M_PI / 2; break;
            case 1: py = h - 1; px = uni(rng) * w; ang = -M_PI / 2; break;
            case 2: py = uni(rng) * h; px = 0; ang = 0; break;
            default: py = uni(rng) * h; px = w - 1; ang = M_PI; break;
        }
        ang += (uni(rng) - real(0.5)) * real(0.8);
        std::normal_distribution<real> turn(0, real(0.16));
        const long steps = static_cast<long>(real(1.4) * std::max(h, w));
        for (long st = 0; st < steps; ++st) {
            const long ylo = std::max<long>(0, static_cast<long>(py - radius - 1));
            const long yhi = std::min<long>(h - 1, static_cast<long>(py + radius + 1));
            const long xlo = std::max<long>(0, static_cast<long>(px - radius - 1));
            const long xhi = std::min<long>(w - 1, static_cast<long>(px + radius + 1));
            for (long y = ylo; y <= yhi; ++y)
                for (long x = xlo; x <= xhi; ++x) {
                    const real dy = y - py, dx = x - px;
                    if (dy * dy + dx * dx <= radius * radius)
                        s.mask.data[static_cast<std::size_t>(y * w + x)] = label;
                }
            ang += turn(rng);
            py += std::sin(ang);
            px += std::cos(ang);
            if (py < 0 || py >= h || px < 0 || px >= w) break;
        }
    }

    // lift all stamped pixels in one pass so overlapping curves stay consistent
    const real vessel_contrast = real(0.24) + real(0.12) * uni(rng);
    for (long i = 0; i < h * w; ++i)
        if (s.mask.data[static_cast<std::size_t>(i)] != 0) s.image[i] += vessel_contrast;

    std::normal_distribution<real> noise(0, real(0.01));
    for (auto& v : s.image.data) v += noise(rng);
    clip01(s.image);
    return s;
}

SynthSample synth_3d(const Shape& sp, long num_classes, std::mt19937_64& rng) {
    const long d = sp[0], h = sp[1], w = sp[2];
    SynthSample s;
    s.image = Tensor({1, d, h, w});
    s.mask = ByteTensor({d, h, w});
    std::uniform_real_distribution<real> uni(0, 1);

    const real b0 = real(0.35) + real(0.2) * uni(rng);
    const real gz = real(-0.1) + real(0.2) * uni(rng);
    const real gy = real(-0.1) + real(0.2) * uni(rng);
    const real gx = real(-0.1) + real(0.2) * uni(rng);

    // nested anisotropic ellipsoids; label shells from the outside in
    const real cz = d * (real(0.38) + real(0.24) * uni(rng));
    const real cy = h * (real(0.38) + real(0.24) * uni(rng));
    const real cx = w * (real(0.38) + real(0.24) * uni(rng));
    const real r_out = (real(0.22) + real(0.10) * uni(rng)) * static_cast<real>(std::min({d, h, w}));
    const real az = real(0.7) + real(0.6) * uni(rng);
    const real ay = real(0.7) + real(0.6) * uni(rng);
    const real ax = real(0.7) + real(0.6) * uni(rng);
    const long shells = std::max<long>(1, num_classes - 1);
    std::vector<real> fracs(static_cast<std::size_t>(shells));  // outer boundary per shell
    for (long i = 0; i < shells; ++i)
        fracs[static_cast<std::size_t>(i)] =
            real(1) - static_cast<real>(i) / static_cast<real>(shells) *
                          (real(0.55) + real(0.2) * uni(rng));
    std::vector<real> lift(static_cast<std::size_t>(shells));
    for (long i = 0; i < shells; ++i)
        lift[static_cast<std::size_t>(i)] = real(0.12) + real(0.13) * static_cast<real>(i);

    std::normal_distribution<real> noise(0, real(0.01));
    for (long z = 0; z < d; ++z)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                real v = b0 + (gz * z / d + gy * y / h + gx * x / w);
                const real ez = (z - cz) / (r_out * az);
                const real ey = (y - cy) / (r_out * ay);
                const real ex = (x - cx) / (r_out * ax);
                const real dist = std::sqrt(ez * ez + ey * ey + ex * ex);
                std::uint8_t label = 0;
                for (long i = 0; i < shells; ++i)
                    if (dist <= fracs[static_cast<std::size_t>(i)])
                        label = static_cast<std::uint8_t>(i + 1);
                if (label > 0) v += lift[static_cast<std::size_t>(label - 1)];
                const long idx = (z * h + y) * w + x;
                s.mask.data[static_cast<std::size_t>(idx)] = label;
                s.image[idx] = v + noise(rng);
            }
    clip01(s.image);
    return s;
}

SynthSample synth_sample(const Shape& size, long num_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    if (size.size() == 2) return synth_2d(size, num_classes, rng);
    return synth_3d(size, num_classes, rng);
}

std::string entry_name(const char* split, long idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05ld.arr", split, idx);
    return buf;
}

}  // namespace

DatasetManifest synth_base_dataset(const fs::path& root, long n_train, long n_test,
                                   const Shape& size, long num_classes, std::uint64_t seed,
                                   const std::string& domain_tag) {
    if (size.size() != 2 && size.size() != 3)
        throw validation_error("synth: size must have 2 or 3 spatial dims");
    for (long d : size)
        if (d < 16 || d % 16 != 0)
            throw validation_error("synth: spatial dims must be positive multiples of 16, got " +
                                   shape_str(size));
    if (num_classes < 2 || num_classes > 4)
        throw validation_error("synth: num_classes must be in [2, 4]");
    if (n_train < 1 && n_test < 1) throw validation_error("synth: empty dataset requested");

    DatasetManifest m;
    m.root = root;
    m.dimensionality = static_cast<int>(size.size());
    m.domain_tag = domain_tag;
    m.num_classes = num_classes;
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    long global = 0;
    auto emit = [&](const char* split, long n, std::vector<PairEntry>& out) {
        for (long i = 0; i < n; ++i, ++global) {
            SynthSample s = synth_sample(size, num_classes, mix_seed(seed, global));
            PairEntry e;
            e.image = "images/" + entry_name(split, i);
            e.mask = "masks/" + entry_name(split, i);
            save_arr(root / e.image, s.image);
            save_arr(root / e.mask, s.mask);
            out.push_back(e);
        }
    };
    emit("train", n_train, m.train);
    emit("test", n_test, m.test);
    save_manifest(m);
    return m;
}

DatasetManifest apply_domain_shift(const DatasetManifest& src, const ShiftSpec& spec,
                                   std::uint64_t seed, const std::string& new_tag,
                                   const fs::path& dst_root) {
    spec.validate();
    DatasetManifest out = src;
    out.root = dst_root;
    out.domain_tag = new_tag;
    fs::create_directories(dst_root / "images");
    fs::create_directories(dst_root / "masks");
    long global = 0;
    auto shift_split = [&](const std::vector<PairEntry>& entries) {
        for (const auto& e : entries) {
            Tensor img = load_image(src, e);
            save_arr(dst_root / e.image, shift_image(img, spec, mix_seed(seed, global++)));
            if (!e.mask.empty()) {
                // masks are copied unchanged
                fs::copy_file(src.root / e.mask, dst_root / e.mask,
                              fs::copy_options::overwrite_existing);
            }
        }
    };
    shift_split(src.train);
    shift_split(src.test);
    save_manifest(out);
    return out;
}

void save_manifest(const DatasetManifest& m) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["dimensionality"] = m.dimensionality;
    j["domain_tag"] = m.domain_tag;
    j["num_classes"] = m.num_classes;
    j["intensity_range"] = m.intensity_range;
    auto split_json = [](const std::vector<PairEntry>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : v) {
            nlohmann::json row;
            row["image"] = e.image;
            if (!e.mask.empty()) row["mask"] = e.mask;
            arr.push_back(row);
        }
        return arr;
    };
    j["splits"]["train"] = split_json(m.train);
    j["splits"]["test"] = split_json(m.test);
    fs::create_directories(m.root);
    std::ofstream f(m.root / "manifest.json", std::ios::trunc);
    if (!f) throw io_error("cannot write " + (m.root / "manifest.json").string());
    f << j.dump(2) << "\n";
}

DatasetManifest load_dataset(const fs::path& root) {
    std::ifstream f(root / "manifest.json");
    if (!f) throw io_error("cannot open dataset manifest " + (root / "manifest.json").string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("corrupt dataset manifest in " + root.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.root = root;
    m.dimensionality = j.at("dimensionality").get<int>();
    m.domain_tag = j.value("domain_tag", std::string());
    m.num_classes = j.at("num_classes").get<long>();
    if (j.contains("intensity_range")) m.intensity_range = j["intensity_range"];
    auto parse_split = [&](const char* name, bool mask_required) {
        std::vector<PairEntry> out;
        if (!j["splits"].contains(name)) return out;
        for (const auto& row : j["splits"][name]) {
            PairEntry e;
            e.image = row.at("image").get<std::string>();
            e.mask = row.value("mask", std::string());
            if (mask_required && e.mask.empty())
                throw validation_error("dataset " + root.string() + ": train image " + e.image +
                                       " has no mask");
            out.push_back(e);
        }
        return out;
    };
    m.train = parse_split("train", true);
    m.test = parse_split("test", false);

    // eager schema check: files exist, dims consistent; pixels stay on disk
    auto check_entry = [&](const PairEntry& e) {
        const fs::path ip = root / e.image;
        if (!fs::exists(ip))
            throw validation_error("dataset " + root.string() + ": missing image file " + e.image);
        const ArrHeader ih = peek_arr(ip);
        if (ih.dtype != ArrDtype::F32 ||
            static_cast<int>(ih.shape.size()) != m.dimensionality + 1)
            throw validation_error("dataset " + root.string() + ": image " + e.image +
                                   " has unexpected layout " + shape_str(ih.shape));
        if (!e.mask.empty()) {
            const fs::path mp = root / e.mask;
            if (!fs::exists(mp))
                throw validation_error("dataset " + root.string() + ": missing mask file " +
                                       e.mask);
            const ArrHeader mh = peek_arr(mp);
            if (mh.dtype != ArrDtype::U8)
                throw validation_error("dataset " + root.string() + ": mask " + e.mask +
                                       " is not uint8");
            const Shape img_sp(ih.shape.begin() + 1, ih.shape.end());
            if (mh.shape != img_sp)
                throw validation_error("dataset " + root.string() + ": image/mask dims differ for " +
                                       e.image + " " + shape_str(img_sp) + " vs " +
                                       shape_str(mh.shape));
        }
    };
    for (const auto& e : m.train) check_entry(e);
    for (const auto& e : m.test) check_entry(e);
    return m;
}

Tensor load_image(const DatasetManifest& m, const PairEntry& e) {
    return load_arr_f32(m.root / e.image);
}

ByteTensor load_mask(const DatasetManifest& m, const PairEntry& e) {
    if (e.mask.empty())
        throw validation_error("entry " + e.image + " carries no ground-truth mask");
    return load_arr_u8(m.root / e.mask);
}

Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw validation_error("stack_images: empty batch");
    Shape s = images[0].shape;
    s.insert(s.begin(), static_cast<long>(images.size()));
    Tensor out(s);
    const long per = images[0].numel();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape != images[0].shape)
            throw shape_error("stack_images: inconsistent image shapes");
        std::copy(images[i].data.begin(), images[i].data.end(),
                  out.data.begin() + static_cast<long>(i) * per);
    }
    return out;
}

}  // namespace adaseg
