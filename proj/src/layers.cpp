#include "adaseg/layers.hpp"

#include <Eigen/Core>

#include <cmath>

namespace adaseg {
namespace nn {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct FeatDims {
    long b, c, s;
    std::vector<long> sp;
};

FeatDims feat_dims(const Tensor& x, const char* where) {
    if (x.ndim() < 4 || x.ndim() > 5)
        throw shape_error(std::string(where) + ": expected 4-d or 5-d feature batch, got " +
                          shape_str(x.shape));
    FeatDims d;
    d.b = x.dim(0);
    d.c = x.dim(1);
    d.s = 1;
    for (int i = 2; i < x.ndim(); ++i) {
        d.sp.push_back(x.dim(i));
        d.s *= x.dim(i);
    }
    return d;
}

// im2col for kernel k, pad k/2, stride 1; cols is (cin * k^nd) x s, row-major.
void im2col(const real* x, const std::vector<long>& sp, long cin, int k, real* cols) {
    const int nd = static_cast<int>(sp.size());
    const int pad = k / 2;
    const long s = (nd == 2) ? sp[0] * sp[1] : sp[0] * sp[1] * sp[2];
    long row = 0;
    if (nd == 2) {
        const long h = sp[0], w = sp[1];
        for (long c = 0; c < cin; ++c) {
            const real* xc = x + c * s;
            for (int oy = -pad; oy <= pad; ++oy) {
                for (int ox = -pad; ox <= pad; ++ox, ++row) {
                    real* out = cols + row * s;
                    for (long y = 0; y < h; ++y) {
                        const long iy = y + oy;
                        real* o = out + y * w;
                        if (iy < 0 || iy >= h) {
                            std::fill(o, o + w, real(0));
                            continue;
                        }
                        const real* src = xc + iy * w;
                        for (long xw = 0; xw < w; ++xw) {
                            const long ix = xw + ox;
                            o[xw] = (ix < 0 || ix >= w) ? real(0) : src[ix];
                        }
                    }
                }
            }
        }
    } else {
        const long dd = sp[0], h = sp[1], w = sp[2];
        for (long c = 0; c < cin; ++c) {
            const real* xc = x + c * s;
            for (int od = -pad; od <= pad; ++od) {
                for (int oy = -pad; oy <= pad; ++oy) {
                    for (int ox = -pad; ox <= pad; ++ox, ++row) {
                        real* out = cols + row * s;
                        for (long z = 0; z < dd; ++z) {
                            const long iz = z + od;
                            for (long y = 0; y < h; ++y) {
                                const long iy = y + oy;
                                real* o = out + (z * h + y) * w;
                                if (iz < 0 || iz >= dd || iy < 0 || iy >= h) {
                                    std::fill(o, o + w, real(0));
                                    continue;
                                }
                                const real* src = xc + (iz * h + iy) * w;
                                for (long xw = 0; xw < w; ++xw) {
                                    const long ix = xw + ox;
                                    o[xw] = (ix < 0 || ix >= w) ? real(0) : src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add transpose of im2col.
void col2im(const real* cols, const std::vector<long>& sp, long cin, int k, real* x) {
    const int nd = static_cast<int>(sp.size());
    const int pad = k / 2;
    const long s = (nd == 2) ? sp[0] * sp[1] : sp[0] * sp[1] * sp[2];
    long row = 0;
    if (nd == 2) {
        const long h = sp[0], w = sp[1];
        for (long c = 0; c < cin; ++c) {
            real* xc = x + c * s;
            for (int oy = -pad; oy <= pad; ++oy) {
                for (int ox = -pad; ox <= pad; ++ox, ++row) {
                    const real* in = cols + row * s;
                    for (long y = 0; y < h; ++y) {
                        const long iy = y + oy;
                        if (iy < 0 || iy >= h) continue;
                        const real* src = in + y * w;
                        real* dst = xc + iy * w;
                        for (long xw = 0; xw < w; ++xw) {
                            const long ix = xw + ox;
                            if (ix >= 0 && ix < w) dst[ix] += src[xw];
                        }
                    }
                }
            }
        }
    } else {
        const long dd = sp[0], h = sp[1], w = sp[2];
        for (long c = 0; c < cin; ++c) {
            real* xc = x + c * s;
            for (int od = -pad; od <= pad; ++od) {
                for (int oy = -pad; oy <= pad; ++oy) {
                    for (int ox = -pad; ox <= pad; ++ox, ++row) {
                        const real* in = cols + row * s;
                        for (long z = 0; z < dd; ++z) {
                            const long iz = z + od;
                            if (iz < 0 || iz >= dd) continue;
                            for (long y = 0; y < h; ++y) {
                                const long iy = y + oy;
                                if (iy < 0 || iy >= h) continue;
                                const real* src = in + (z * h + y) * w;
                                real* dst = xc + (iz * h + iy) * w;
                                for (long xw = 0; xw < w; ++xw) {
                                    const long ix = xw + ox;
                                    if (ix >= 0 && ix < w) dst[ix] += src[xw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

long kernel_taps(int k, int nd) {
    long t = 1;
    for (int i = 0; i < nd; ++i) t *= k;
    return t;
}

thread_local std::vector<real> g_col_scratch;

}  // namespace

// ============================================================================
// Conv
// ============================================================================

Conv::Conv(long cin, long cout, int kernel, int nd) : cin_(cin), cout_(cout), k_(kernel), nd_(nd) {
    if (kernel != 1 && kernel != 3)
        throw validation_error("Conv: only kernels 1 and 3 are supported");
    if (nd != 2 && nd != 3) throw validation_error("Conv: nd must be 2 or 3");
    const long taps = kernel_taps(k_, nd_);
    w = Tensor({cout_, cin_ * taps});
    b = Tensor({cout_});
    dw = Tensor(w.shape);
    db = Tensor(b.shape);
}

void Conv::init_he(std::mt19937_64& rng) {
    const long fan_in = cin_ * kernel_taps(k_, nd_);
    std::normal_distribution<real> dist(real(0), std::sqrt(real(2) / static_cast<real>(fan_in)));
    for (auto& v : w.data) v = dist(rng);
    b.fill(real(0));
}

Tensor Conv::forward(const Tensor& x) const {
    const auto d = feat_dims(x, "Conv::forward");
    if (d.c != cin_)
        throw shape_error("Conv::forward: expected " + std::to_string(cin_) + " channels, got " +
                          std::to_string(d.c));
    Shape out_shape = x.shape;
    out_shape[1] = cout_;
    Tensor y(out_shape);
    const long taps = kernel_taps(k_, nd_);
    ConstMatMap wm(w.ptr(), cout_, cin_ * taps);
    for (long bi = 0; bi < d.b; ++bi) {
        const real* xb = x.ptr() + bi * d.c * d.s;
        MatMap ym(y.ptr() + bi * cout_ * d.s, cout_, d.s);
        if (k_ == 1) {
            ConstMatMap xm(xb, cin_, d.s);
            ym.noalias() = wm * xm;
        } else {
            g_col_scratch.resize(static_cast<std::size_t>(cin_ * taps * d.s));
            im2col(xb, d.sp, cin_, k_, g_col_scratch.data());
            ConstMatMap cm(g_col_scratch.data(), cin_ * taps, d.s);
            ym.noalias() = wm * cm;
        }
        for (long c = 0; c < cout_; ++c) ym.row(c).array() += b[c];
    }
    return y;
}

Tensor Conv::backward_data(const Tensor& dy) const {
    const auto d = feat_dims(dy, "Conv::backward_data");
    if (d.c != cout_) throw shape_error("Conv::backward_data: channel mismatch");
    Shape in_shape = dy.shape;
    in_shape[1] = cin_;
    Tensor dx(in_shape);
    const long taps = kernel_taps(k_, nd_);
    ConstMatMap wm(w.ptr(), cout_, cin_ * taps);
    for (long bi = 0; bi < d.b; ++bi) {
        ConstMatMap gym(dy.ptr() + bi * cout_ * d.s, cout_, d.s);
        if (k_ == 1) {
            MatMap dxm(dx.ptr() + bi * cin_ * d.s, cin_, d.s);
            dxm.noalias() = wm.transpose() * gym;
        } else {
            g_col_scratch.resize(static_cast<std::size_t>(cin_ * taps * d.s));
            MatMap dcm(g_col_scratch.data(), cin_ * taps, d.s);
            dcm.noalias() = wm.transpose() * gym;
            col2im(g_col_scratch.data(), d.sp, cin_, k_, dx.ptr() + bi * cin_ * d.s);
        }
    }
    return dx;
}

void Conv::backward_param(const Tensor& dy, const Tensor& x) {
    const auto d = feat_dims(x, "Conv::backward_param");
    const auto do_ = feat_dims(dy, "Conv::backward_param");
    if (d.c != cin_ || do_.c != cout_ || d.s != do_.s || d.b != do_.b)
        throw shape_error("Conv::backward_param: shape mismatch");
    const long taps = kernel_taps(k_, nd_);
    MatMap dwm(dw.ptr(), cout_, cin_ * taps);
    for (long bi = 0; bi < d.b; ++bi) {
        ConstMatMap gym(dy.ptr() + bi * cout_ * d.s, cout_, d.s);
        if (k_ == 1) {
            ConstMatMap xm(x.ptr() + bi * cin_ * d.s, cin_, d.s);
            dwm.noalias() += gym * xm.transpose();
        } else {
            g_col_scratch.resize(static_cast<std::size_t>(cin_ * taps * d.s));
            im2col(x.ptr() + bi * d.c * d.s, d.sp, cin_, k_, g_col_scratch.data());
            ConstMatMap cm(g_col_scratch.data(), cin_ * taps, d.s);
            dwm.noalias() += gym * cm.transpose();
        }
        for (long c = 0; c < cout_; ++c) db[c] += gym.row(c).sum();
    }
}

void Conv::collect(const std::string& prefix, ParamMap& out) {
    out.push_back({prefix + ".weight", &w, &dw, true});
    out.push_back({prefix + ".bias", &b, &db, true});
}

void Conv::zero_grad() {
    dw.fill(real(0));
    db.fill(real(0));
}

// ============================================================================
// MaxPool
// ============================================================================

Tensor MaxPool::forward(const Tensor& x, std::vector<long>& argmax) {
    const auto d = feat_dims(x, "MaxPool::forward");
    Shape out_shape = x.shape;
    for (std::size_t i = 2; i < out_shape.size(); ++i) {
        if (out_shape[i] % 2 != 0)
            throw shape_error("MaxPool: odd spatial dimension " + std::to_string(out_shape[i]));
        out_shape[i] /= 2;
    }
    Tensor y(out_shape);
    long so = 1;
    for (std::size_t i = 2; i < out_shape.size(); ++i) so *= out_shape[i];
    argmax.assign(static_cast<std::size_t>(d.b * d.c * so), 0);

    const int nd = static_cast<int>(d.sp.size());
    for (long bc = 0; bc < d.b * d.c; ++bc) {
        const real* xs = x.ptr() + bc * d.s;
        real* ys = y.ptr() + bc * so;
        long* am = argmax.data() + bc * so;
        if (nd == 2) {
            const long h = d.sp[0], w = d.sp[1];
            const long ow = w / 2;
            for (long oy = 0; oy < h / 2; ++oy) {
                for (long ox = 0; ox < ow; ++ox) {
                    long best = (2 * oy) * w + 2 * ox;
                    for (int dy2 = 0; dy2 < 2; ++dy2)
                        for (int dx2 = 0; dx2 < 2; ++dx2) {
                            const long idx = (2 * oy + dy2) * w + 2 * ox + dx2;
                            if (xs[idx] > xs[best]) best = idx;
                        }
                    ys[oy * ow + ox] = xs[best];
                    am[oy * ow + ox] = best;
                }
            }
        } else {
            const long dd = d.sp[0], h = d.sp[1], w = d.sp[2];
            const long oh = h / 2, ow = w / 2;
            for (long oz = 0; oz < dd / 2; ++oz)
                for (long oy = 0; oy < oh; ++oy)
                    for (long ox = 0; ox < ow; ++ox) {
                        long best = ((2 * oz) * h + 2 * oy) * w + 2 * ox;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy2 = 0; dy2 < 2; ++dy2)
                                for (int dx2 = 0; dx2 < 2; ++dx2) {
                                    const long idx =
                                        ((2 * oz + dz) * h + 2 * oy + dy2) * w + 2 * ox + dx2;
                                    if (xs[idx] > xs[best]) best = idx;
                                }
                        ys[(oz * oh + oy) * ow + ox] = xs[best];
                        am[(oz * oh + oy) * ow + ox] = best;
                    }
        }
    }
    return y;
}

Tensor MaxPool::backward(const Tensor& dy, const std::vector<long>& argmax,
                         const Shape& input_shape) {
    Tensor dx(input_shape);
    const auto d = feat_dims(dy, "MaxPool::backward");
    long si = 1;
    for (std::size_t i = 2; i < input_shape.size(); ++i) si *= input_shape[i];
    for (long bc = 0; bc < d.b * d.c; ++bc) {
        const real* g = dy.ptr() + bc * d.s;
        const long* am = argmax.data() + bc * d.s;
        real* out = dx.ptr() + bc * si;
        for (long i = 0; i < d.s; ++i) out[am[i]] += g[i];
    }
    return dx;
}

// ============================================================================
// Upsample (x2 linear, align_corners = false)
// ============================================================================

namespace {

struct AxisTable {
    std::vector<long> i0, i1;
    std::vector<real> w1;  // weight of i1; weight of i0 is 1 - w1
};

AxisTable upsample_axis(long n_in) {
    AxisTable t;
    const long n_out = 2 * n_in;
    t.i0.resize(n_out);
    t.i1.resize(n_out);
    t.w1.resize(n_out);
    for (long o = 0; o < n_out; ++o) {
        const real c = (static_cast<real>(o) + real(0.5)) / real(2) - real(0.5);
        long i0 = static_cast<long>(std::floor(c));
        real w1 = c - static_cast<real>(i0);
        long i1 = i0 + 1;
        if (i0 < 0) {
            i0 = 0;
            i1 = 0;
            w1 = 0;
        }
        if (i1 >= n_in) {
            i1 = n_in - 1;
            i0 = n_in - 1;
            w1 = 0;
        }
        t.i0[o] = i0;
        t.i1[o] = i1;
        t.w1[o] = w1;
    }
    return t;
}

}  // namespace

Tensor Upsample::forward(const Tensor& x) {
    const auto d = feat_dims(x, "Upsample::forward");
    Shape out_shape = x.shape;
    for (std::size_t i = 2; i < out_shape.size(); ++i) out_shape[i] *= 2;
    Tensor y(out_shape);
    const int nd = static_cast<int>(d.sp.size());
    if (nd == 2) {
        const AxisTable ty = upsample_axis(d.sp[0]), tx = upsample_axis(d.sp[1]);
        const long w = d.sp[1], ow = 2 * w, oh = 2 * d.sp[0];
        for (long bc = 0; bc < d.b * d.c; ++bc) {
            const real* xs = x.ptr() + bc * d.s;
            real* ys = y.ptr() + bc * oh * ow;
            for (long oy = 0; oy < oh; ++oy) {
                const real* r0 = xs + ty.i0[oy] * w;
                const real* r1 = xs + ty.i1[oy] * w;
                const real wy = ty.w1[oy];
                for (long ox = 0; ox < ow; ++ox) {
                    const real v0 = r0[tx.i0[ox]] * (1 - tx.w1[ox]) + r0[tx.i1[ox]] * tx.w1[ox];
                    const real v1 = r1[tx.i0[ox]] * (1 - tx.w1[ox]) + r1[tx.i1[ox]] * tx.w1[ox];
                    ys[oy * ow + ox] = v0 * (1 - wy) + v1 * wy;
                }
            }
        }
    } else {
        const AxisTable tz = upsample_axis(d.sp[0]), ty = upsample_axis(d.sp[1]),
                        tx = upsample_axis(d.sp[2]);
        const long h = d.sp[1], w = d.sp[2];
        const long od = 2 * d.sp[0], oh = 2 * h, ow = 2 * w;
        for (long bc = 0; bc < d.b * d.c; ++bc) {
            const real* xs = x.ptr() + bc * d.s;
            real* ys = y.ptr() + bc * od * oh * ow;
            for (long oz = 0; oz < od; ++oz) {
                const real wz = tz.w1[oz];
                for (long oy = 0; oy < oh; ++oy) {
                    const real wy = ty.w1[oy];
                    for (long ox = 0; ox < ow; ++ox) {
                        const real wx = tx.w1[ox];
                        real acc = 0;
                        for (int cz = 0; cz < 2; ++cz)
                            for (int cy = 0; cy < 2; ++cy)
                                for (int cx = 0; cx < 2; ++cx) {
                                    const long iz = cz ? tz.i1[oz] : tz.i0[oz];
                                    const long iy = cy ? ty.i1[oy] : ty.i0[oy];
                                    const long ix = cx ? tx.i1[ox] : tx.i0[ox];
                                    const real wgt = (cz ? wz : 1 - wz) * (cy ? wy : 1 - wy) *
                                                     (cx ? wx : 1 - wx);
                                    acc += wgt * xs[(iz * h + iy) * w + ix];
                                }
                        ys[(oz * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    return y;
}

Tensor Upsample::backward(const Tensor& dy, const Shape& input_shape) {
    Tensor dx(input_shape);
    const auto din = feat_dims(dx, "Upsample::backward");
    const auto d = feat_dims(dy, "Upsample::backward");
    const int nd = static_cast<int>(din.sp.size());
    if (nd == 2) {
        const AxisTable ty = upsample_axis(din.sp[0]), tx = upsample_axis(din.sp[1]);
        const long w = din.sp[1], ow = d.sp[1], oh = d.sp[0];
        for (long bc = 0; bc < d.b * d.c; ++bc) {
            const real* g = dy.ptr() + bc * d.s;
            real* out = dx.ptr() + bc * din.s;
            for (long oy = 0; oy < oh; ++oy) {
                const real wy = ty.w1[oy];
                for (long ox = 0; ox < ow; ++ox) {
                    const real wx = tx.w1[ox];
                    const real v = g[oy * ow + ox];
                    out[ty.i0[oy] * w + tx.i0[ox]] += v * (1 - wy) * (1 - wx);
                    out[ty.i0[oy] * w + tx.i1[ox]] += v * (1 - wy) * wx;
                    out[ty.i1[oy] * w + tx.i0[ox]] += v * wy * (1 - wx);
                    out[ty.i1[oy] * w + tx.i1[ox]] += v * wy * wx;
                }
            }
        }
    } else {
        const AxisTable tz = upsample_axis(din.sp[0]), ty = upsample_axis(din.sp[1]),
                        tx = upsample_axis(din.sp[2]);
        const long h = din.sp[1], w = din.sp[2];
        const long od = d.sp[0], oh = d.sp[1], ow = d.sp[2];
        for (long bc = 0; bc < d.b * d.c; ++bc) {
            const real* g = dy.ptr() + bc * d.s;
            real* out = dx.ptr() + bc * din.s;
            for (long oz = 0; oz < od; ++oz)
                for (long oy = 0; oy < oh; ++oy)
                    for (long ox = 0; ox < ow; ++ox) {
                        const real v = g[(oz * oh + oy) * ow + ox];
                        const real wz = tz.w1[oz], wy = ty.w1[oy], wx = tx.w1[ox];
                        for (int cz = 0; cz < 2; ++cz)
                            for (int cy = 0; cy < 2; ++cy)
                                for (int cx = 0; cx < 2; ++cx) {
                                    const long iz = cz ? tz.i1[oz] : tz.i0[oz];
                                    const long iy = cy ? ty.i1[oy] : ty.i0[oy];
                                    const long ix = cx ? tx.i1[ox] : tx.i0[ox];
                                    out[(iz * h + iy) * w + ix] += v * (cz ? wz : 1 - wz) *
                                                                   (cy ? wy : 1 - wy) *
                                                                   (cx ? wx : 1 - wx);
                                }
                    }
        }
    }
    return dx;
}

// ============================================================================
// Relu
// ============================================================================

Tensor Relu::forward(const Tensor& x) {
    Tensor y(x.shape);
    for (long i = 0; i < x.numel(); ++i) y[i] = x[i] > real(0) ? x[i] : real(0);
    return y;
}

Tensor Relu::backward(const Tensor& dy, const Tensor& y) {
    Tensor dx(dy.shape);
    for (long i = 0; i < dy.numel(); ++i) dx[i] = y[i] > real(0) ? dy[i] : real(0);
    return dx;
}

// ============================================================================
// BatchNorm
// ============================================================================

BatchNorm::BatchNorm(long channels) : channels_(channels) {
    gamma = Tensor({channels}, real(1));
    beta = Tensor({channels});
    dgamma = Tensor({channels});
    dbeta = Tensor({channels});
    running_mean = Tensor({channels});
    running_var = Tensor({channels}, real(1));
}

Tensor BatchNorm::forward(const Tensor& x, StatsMode mode, bool update_running, Cache* cache) {
    const auto d = feat_dims(x, "BatchNorm::forward");
    if (d.c != channels_) throw shape_error("BatchNorm: channel mismatch");
    Tensor y(x.shape);
    const long groups = (mode == StatsMode::Batch || mode == StatsMode::Running) ? 1 : d.b;
    if (cache) {
        cache->xhat = Tensor(x.shape);
        cache->inv_std.assign(static_cast<std::size_t>(groups * d.c), real(0));
        cache->mode = mode;
        cache->b = d.b;
        cache->c = d.c;
        cache->s = d.s;
    }
    for (long c = 0; c < d.c; ++c) {
        for (long g = 0; g < groups; ++g) {
            const long b_lo = (groups == 1) ? 0 : g;
            const long b_hi = (groups == 1) ? d.b : g + 1;
            real mu, var;
            if (mode == StatsMode::Running) {
                mu = running_mean[c];
                var = running_var[c];
            } else {
                real sum = 0, sq = 0;
                for (long b = b_lo; b < b_hi; ++b) {
                    const real* xs = x.ptr() + (b * d.c + c) * d.s;
                    for (long i = 0; i < d.s; ++i) {
                        sum += xs[i];
                        sq += xs[i] * xs[i];
                    }
                }
                const real n = static_cast<real>((b_hi - b_lo) * d.s);
                mu = sum / n;
                var = std::max(real(0), sq / n - mu * mu);
            }
            const real inv = real(1) / std::sqrt(var + eps);
            if (cache) cache->inv_std[static_cast<std::size_t>(g * d.c + c)] = inv;
            if (update_running && mode == StatsMode::Batch) {
                running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (1 - momentum) * running_var[c] + momentum * var;
            }
            for (long b = b_lo; b < b_hi; ++b) {
                const real* xs = x.ptr() + (b * d.c + c) * d.s;
                real* ys = y.ptr() + (b * d.c + c) * d.s;
                real* xh = cache ? cache->xhat.ptr() + (b * d.c + c) * d.s : nullptr;
                for (long i = 0; i < d.s; ++i) {
                    const real h = (xs[i] - mu) * inv;
                    if (xh) xh[i] = h;
                    ys[i] = gamma[c] * h + beta[c];
                }
            }
        }
    }
    return y;
}

Tensor BatchNorm::backward(const Tensor& dy, const Cache& cache) {
    note_grad_op();
    const long b = cache.b, c_n = cache.c, s = cache.s;
    Tensor dx(dy.shape);
    const long groups = (cache.mode == StatsMode::Batch || cache.mode == StatsMode::Running)
                            ? 1
                            : b;
    for (long c = 0; c < c_n; ++c) {
        for (long g = 0; g < groups; ++g) {
            const long b_lo = (groups == 1) ? 0 : g;
            const long b_hi = (groups == 1) ? b : g + 1;
            const real inv = cache.inv_std[static_cast<std::size_t>(g * c_n + c)];
            real sum_g = 0, sum_gx = 0;
            for (long bi = b_lo; bi < b_hi; ++bi) {
                const real* gp = dy.ptr() + (bi * c_n + c) * s;
                const real* xh = cache.xhat.ptr() + (bi * c_n + c) * s;
                for (long i = 0; i < s; ++i) {
                    sum_g += gp[i];
                    sum_gx += gp[i] * xh[i];
                }
            }
            dbeta[c] += sum_g;
            dgamma[c] += sum_gx;
            if (cache.mode == StatsMode::Running) {
                for (long bi = b_lo; bi < b_hi; ++bi) {
                    const real* gp = dy.ptr() + (bi * c_n + c) * s;
                    real* dxp = dx.ptr() + (bi * c_n + c) * s;
                    for (long i = 0; i < s; ++i) dxp[i] = gp[i] * gamma[c] * inv;
                }
            } else {
                const real n = static_cast<real>((b_hi - b_lo) * s);
                const real mean_h = gamma[c] * sum_g / n;
                const real mean_hx = gamma[c] * sum_gx / n;
                for (long bi = b_lo; bi < b_hi; ++bi) {
                    const real* gp = dy.ptr() + (bi * c_n + c) * s;
                    const real* xh = cache.xhat.ptr() + (bi * c_n + c) * s;
                    real* dxp = dx.ptr() + (bi * c_n + c) * s;
                    for (long i = 0; i < s; ++i)
                        dxp[i] = inv * (gamma[c] * gp[i] - mean_h - xh[i] * mean_hx);
                }
            }
        }
    }
    return dx;
}

void BatchNorm::collect(const std::string& prefix, ParamMap& out) {
    out.push_back({prefix + ".gamma", &gamma, &dgamma, true});
    out.push_back({prefix + ".beta", &beta, &dbeta, true});
    out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
    out.push_back({prefix + ".running_var", &running_var, nullptr, false});
}

void BatchNorm::zero_grad() {
    dgamma.fill(real(0));
    dbeta.fill(real(0));
}

// ============================================================================
// AdaBN
// ============================================================================

AdaBN::AdaBN(long channels, long code_channels)
    : channels_(channels), code_channels_(code_channels) {
    gamma = Tensor({channels}, real(1));
    beta = Tensor({channels});
    proj = Tensor({channels, code_channels});
    dgamma = Tensor({channels});
    dbeta = Tensor({channels});
    dproj = Tensor(proj.shape);
    running_mean = Tensor({channels});
    running_var = Tensor({channels}, real(1));
}

void AdaBN::init_projection(std::mt19937_64& rng) {
    std::normal_distribution<real> dist(real(0),
                                        real(1) / std::sqrt(static_cast<real>(code_channels_)));
    for (auto& v : proj.data) v = dist(rng);
}

Tensor AdaBN::forward(const Tensor& x, const std::vector<const Tensor*>& codes, StatsMode mode,
                      bool update_running, Cache* cache) {
    const auto d = feat_dims(x, "AdaBN::forward");
    if (d.c != channels_) throw shape_error("AdaBN: channel mismatch");
    if (codes.empty()) throw contract_error("AdaBN: domain code required");
    if (codes.size() != 1 && codes.size() != static_cast<std::size_t>(d.b))
        throw shape_error("AdaBN: need one code or one per batch instance");

    // Per-instance target statistics from the projected codes.
    long m = 1;
    {
        const Tensor& c0 = *codes[0];
        if (c0.ndim() < 2 || c0.dim(0) != code_channels_)
            throw shape_error("AdaBN: code has " +
                              std::to_string(c0.ndim() > 0 ? c0.dim(0) : 0) +
                              " channels, projection expects " + std::to_string(code_channels_));
        m = 1;
        for (int i = 1; i < c0.ndim(); ++i) m *= c0.dim(i);
    }
    Tensor proj_map({d.b, d.c, m});
    Tensor mu_y({d.b, d.c}), sg_y({d.b, d.c});
    std::vector<real> sg_raw(static_cast<std::size_t>(d.b * d.c));
    ConstMatMap pm(proj.ptr(), d.c, code_channels_);
    for (long bi = 0; bi < d.b; ++bi) {
        const Tensor& code = *codes[codes.size() == 1 ? 0 : static_cast<std::size_t>(bi)];
        long mi = 1;
        for (int i = 1; i < code.ndim(); ++i) mi *= code.dim(i);
        if (code.dim(0) != code_channels_ || mi != m)
            throw shape_error("AdaBN: inconsistent code shapes within batch");
        ConstMatMap cm(code.ptr(), code_channels_, m);
        MatMap out(proj_map.ptr() + bi * d.c * m, d.c, m);
        out.noalias() = pm * cm;
        for (long c = 0; c < d.c; ++c) {
            const real* p = proj_map.ptr() + (bi * d.c + c) * m;
            real sum = 0, sq = 0;
            for (long i = 0; i < m; ++i) {
                sum += p[i];
                sq += p[i] * p[i];
            }
            const real mu = sum / static_cast<real>(m);
            const real var = std::max(real(0), sq / static_cast<real>(m) - mu * mu);
            const real raw = std::sqrt(var);
            mu_y[bi * d.c + c] = mu;
            sg_raw[static_cast<std::size_t>(bi * d.c + c)] = raw;
            sg_y[bi * d.c + c] = std::max(raw, eps);
        }
    }

    const long groups = (mode == StatsMode::Batch || mode == StatsMode::Running) ? 1 : d.b;
    Tensor y(x.shape);
    if (cache) {
        cache->xhat = Tensor(x.shape);
        cache->inv_std.assign(static_cast<std::size_t>(groups * d.c), real(0));
        cache->mode = mode;
        cache->b = d.b;
        cache->c = d.c;
        cache->s = d.s;
        cache->m = m;
        cache->code_values = codes;
    }
    for (long c = 0; c < d.c; ++c) {
        for (long g = 0; g < groups; ++g) {
            const long b_lo = (groups == 1) ? 0 : g;
            const long b_hi = (groups == 1) ? d.b : g + 1;
            real mu, var;
            if (mode == StatsMode::Running) {
                mu = running_mean[c];
                var = running_var[c];
            } else {
                real sum = 0, sq = 0;
                for (long b = b_lo; b < b_hi; ++b) {
                    const real* xs = x.ptr() + (b * d.c + c) * d.s;
                    for (long i = 0; i < d.s; ++i) {
                        sum += xs[i];
                        sq += xs[i] * xs[i];
                    }
                }
                const real n = static_cast<real>((b_hi - b_lo) * d.s);
                mu = sum / n;
                var = std::max(real(0), sq / n - mu * mu);
            }
            const real inv = real(1) / std::sqrt(var + eps);
            if (cache) cache->inv_std[static_cast<std::size_t>(g * d.c + c)] = inv;
            if (update_running && mode == StatsMode::Batch && track_running) {
                running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (1 - momentum) * running_var[c] + momentum * var;
            }
            for (long b = b_lo; b < b_hi; ++b) {
                const real* xs = x.ptr() + (b * d.c + c) * d.s;
                real* ys = y.ptr() + (b * d.c + c) * d.s;
                real* xh = cache ? cache->xhat.ptr() + (b * d.c + c) * d.s : nullptr;
                const real sy = sg_y[b * d.c + c];
                const real my = mu_y[b * d.c + c];
                for (long i = 0; i < d.s; ++i) {
                    const real h = (xs[i] - mu) * inv;
                    if (xh) xh[i] = h;
                    ys[i] = gamma[c] * (sy * h + my) + beta[c];
                }
            }
        }
    }
    if (cache) {
        cache->proj_map = std::move(proj_map);
        cache->mu_y = std::move(mu_y);
        cache->sg_y = std::move(sg_y);
        cache->sg_y_raw = std::move(sg_raw);
    }
    return y;
}

Tensor AdaBN::backward(const Tensor& dy, const Cache& cache) {
    note_grad_op();
    const long b = cache.b, c_n = cache.c, s = cache.s, m = cache.m;
    Tensor dx(dy.shape);
    Tensor dmu_y({b, c_n}), dsg_y({b, c_n});

    // Affine and target-stat gradients; h = dL/dxhat.
    Tensor h(dy.shape);
    for (long bi = 0; bi < b; ++bi) {
        for (long c = 0; c < c_n; ++c) {
            const real* gp = dy.ptr() + (bi * c_n + c) * s;
            const real* xh = cache.xhat.ptr() + (bi * c_n + c) * s;
            real* hp = h.ptr() + (bi * c_n + c) * s;
            const real sy = cache.sg_y[bi * c_n + c];
            const real my = cache.mu_y[bi * c_n + c];
            real sum_g = 0, sum_gx = 0;
            for (long i = 0; i < s; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * xh[i];
                hp[i] = gp[i] * gamma[c] * sy;
            }
            dbeta[c] += sum_g;
            dgamma[c] += sy * sum_gx + my * sum_g;
            dmu_y[bi * c_n + c] = gamma[c] * sum_g;
            dsg_y[bi * c_n + c] = gamma[c] * sum_gx;
        }
    }

    // Through the feature normalization.
    const long groups = (cache.mode == StatsMode::Batch || cache.mode == StatsMode::Running)
                            ? 1
                            : b;
    for (long c = 0; c < c_n; ++c) {
        for (long g = 0; g < groups; ++g) {
            const long b_lo = (groups == 1) ? 0 : g;
            const long b_hi = (groups == 1) ? b : g + 1;
            const real inv = cache.inv_std[static_cast<std::size_t>(g * c_n + c)];
            if (cache.mode == StatsMode::Running) {
                for (long bi = b_lo; bi < b_hi; ++bi) {
                    const real* hp = h.ptr() + (bi * c_n + c) * s;
                    real* dxp = dx.ptr() + (bi * c_n + c) * s;
                    for (long i = 0; i < s; ++i) dxp[i] = hp[i] * inv;
                }
                continue;
            }
            real sum_h = 0, sum_hx = 0;
            for (long bi = b_lo; bi < b_hi; ++bi) {
                const real* hp = h.ptr() + (bi * c_n + c) * s;
                const real* xh = cache.xhat.ptr() + (bi * c_n + c) * s;
                for (long i = 0; i < s; ++i) {
                    sum_h += hp[i];
                    sum_hx += hp[i] * xh[i];
                }
            }
            const real n = static_cast<real>((b_hi - b_lo) * s);
            const real mean_h = sum_h / n;
            const real mean_hx = sum_hx / n;
            for (long bi = b_lo; bi < b_hi; ++bi) {
                const real* hp = h.ptr() + (bi * c_n + c) * s;
                const real* xh = cache.xhat.ptr() + (bi * c_n + c) * s;
                real* dxp = dx.ptr() + (bi * c_n + c) * s;
                for (long i = 0; i < s; ++i)
                    dxp[i] = inv * (hp[i] - mean_h - xh[i] * mean_hx);
            }
        }
    }

    // Through the code projection: dP = dmu/M + dsg * (P - mu) / (M * sg_raw).
    Tensor dP({b, c_n, m});
    for (long bi = 0; bi < b; ++bi) {
        for (long c = 0; c < c_n; ++c) {
            const real* p = cache.proj_map.ptr() + (bi * c_n + c) * m;
            real* dp = dP.ptr() + (bi * c_n + c) * m;
            const real mu = cache.mu_y[bi * c_n + c];
            const real raw = cache.sg_y_raw[static_cast<std::size_t>(bi * c_n + c)];
            const real dmu = dmu_y[bi * c_n + c] / static_cast<real>(m);
            const bool floored = raw <= eps || raw == real(0);
            const real dsg = floored ? real(0)
                                     : dsg_y[bi * c_n + c] / (static_cast<real>(m) * raw);
            for (long i = 0; i < m; ++i) dp[i] = dmu + dsg * (p[i] - mu);
        }
        const Tensor& code =
            *cache.code_values[cache.code_values.size() == 1 ? 0 : static_cast<std::size_t>(bi)];
        ConstMatMap cm(code.ptr(), code_channels_, m);
        ConstMatMap dpm(dP.ptr() + bi * c_n * m, c_n, m);
        MatMap dprojm(dproj.ptr(), c_n, code_channels_);
        dprojm.noalias() += dpm * cm.transpose();
    }
    return dx;
}

void AdaBN::collect(const std::string& prefix, ParamMap& out) {
    out.push_back({prefix + ".gamma", &gamma, &dgamma, true});
    out.push_back({prefix + ".beta", &beta, &dbeta, true});
    out.push_back({prefix + ".proj", &proj, &dproj, true});
    if (track_running) {
        out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
        out.push_back({prefix + ".running_var", &running_var, nullptr, false});
    }
}

void AdaBN::zero_grad() {
    dgamma.fill(real(0));
    dbeta.fill(real(0));
    dproj.fill(real(0));
}

// ============================================================================
// Channel concat / split
// ============================================================================

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const auto da = feat_dims(a, "concat_channels");
    const auto db_ = feat_dims(b, "concat_channels");
    if (da.b != db_.b || da.s != db_.s || da.sp != db_.sp)
        throw shape_error("concat_channels: incompatible shapes " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
    Shape out_shape = a.shape;
    out_shape[1] = da.c + db_.c;
    Tensor y(out_shape);
    for (long bi = 0; bi < da.b; ++bi) {
        std::copy(a.ptr() + bi * da.c * da.s, a.ptr() + (bi + 1) * da.c * da.s,
                  y.ptr() + bi * (da.c + db_.c) * da.s);
        std::copy(b.ptr() + bi * db_.c * da.s, b.ptr() + (bi + 1) * db_.c * da.s,
                  y.ptr() + (bi * (da.c + db_.c) + da.c) * da.s);
    }
    return y;
}

void split_channels(const Tensor& dy, long c_a, Tensor& da, Tensor& db) {
    const auto d = feat_dims(dy, "split_channels");
    const long c_b = d.c - c_a;
    Shape sa = dy.shape, sb = dy.shape;
    sa[1] = c_a;
    sb[1] = c_b;
    da = Tensor(sa);
    db = Tensor(sb);
    for (long bi = 0; bi < d.b; ++bi) {
        std::copy(dy.ptr() + bi * d.c * d.s, dy.ptr() + (bi * d.c + c_a) * d.s,
                  da.ptr() + bi * c_a * d.s);
        std::copy(dy.ptr() + (bi * d.c + c_a) * d.s, dy.ptr() + (bi + 1) * d.c * d.s,
                  db.ptr() + bi * c_b * d.s);
    }
}

}  // namespace nn
}  // namespace adaseg
