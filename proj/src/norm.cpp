#include "adaseg/norm.hpp"

#include <cmath>

namespace adaseg {

namespace {

// Feature batches are (B, C, *spatial); spatial entries are contiguous per (b, c).
struct BatchDims {
    long b, c, s;
};

BatchDims feature_dims(const Tensor& X, const char* where) {
    if (X.ndim() < 3)
        throw shape_error(std::string(where) + ": expected (batch, channels, *spatial), got " +
                          shape_str(X.shape));
    BatchDims d{X.dim(0), X.dim(1), 1};
    for (int i = 2; i < X.ndim(); ++i) d.s *= X.dim(i);
    if (d.b < 1 || d.s < 1)
        throw shape_error(std::string(where) + ": empty batch or spatial extent in " +
                          shape_str(X.shape));
    return d;
}

void check_affine(const Tensor& v, long c, const char* what, const char* where) {
    if (v.ndim() != 1 || v.dim(0) != c)
        throw shape_error(std::string(where) + ": " + what + " must have length " +
                          std::to_string(c) + ", got " + shape_str(v.shape));
}

void check_finite(const Tensor& X, const char* where) {
    if (!X.all_finite())
        throw validation_error(std::string(where) + ": input contains non-finite entries");
}

}  // namespace

std::string stats_mode_name(StatsMode m) {
    switch (m) {
        case StatsMode::Batch: return "batch";
        case StatsMode::Instance: return "instance";
        case StatsMode::Running: return "running";
    }
    return "?";
}

Tensor batch_norm(const Tensor& X, const Tensor& gamma, const Tensor& beta, real eps,
                  StatsMode stats_mode, const ChannelStats* running) {
    const auto d = feature_dims(X, "batch_norm");
    check_affine(gamma, d.c, "gamma", "batch_norm");
    check_affine(beta, d.c, "beta", "batch_norm");
    check_finite(X, "batch_norm");
    if (eps < 0) throw validation_error("batch_norm: eps must be non-negative");

    Tensor out(X.shape);
    for (long c = 0; c < d.c; ++c) {
        real mu, sigma;
        if (stats_mode == StatsMode::Running) {
            if (!running) throw validation_error("batch_norm: running stats required");
            check_affine(running->mean, d.c, "running mean", "batch_norm");
            check_affine(running->std, d.c, "running std", "batch_norm");
            mu = running->mean[c];
            sigma = running->std[c];
        } else {
            // batch mode: pool over batch + spatial
            real sum = 0, sq = 0;
            for (long b = 0; b < d.b; ++b) {
                const real* x = X.ptr() + (b * d.c + c) * d.s;
                for (long i = 0; i < d.s; ++i) {
                    sum += x[i];
                    sq += x[i] * x[i];
                }
            }
            const real n = static_cast<real>(d.b * d.s);
            mu = sum / n;
            const real var = std::max(real(0), sq / n - mu * mu);
            if (var + eps <= real(0))
                throw numeric_error("batch_norm: zero-variance channel " + std::to_string(c) +
                                    " with eps=0");
            sigma = std::sqrt(var + eps);
        }
        const real scale = gamma[c] / sigma;
        const real shift = beta[c] - scale * mu;
        for (long b = 0; b < d.b; ++b) {
            const real* x = X.ptr() + (b * d.c + c) * d.s;
            real* z = out.ptr() + (b * d.c + c) * d.s;
            for (long i = 0; i < d.s; ++i) z[i] = scale * x[i] + shift;
        }
    }
    return out;
}

Tensor ada_in(const Tensor& x, const Tensor& y, real eps) {
    const auto dx = feature_dims(x, "ada_in");
    const auto dy = feature_dims(y, "ada_in");
    if (dx.c != dy.c)
        throw shape_error("ada_in: channel mismatch " + std::to_string(dx.c) + " vs " +
                          std::to_string(dy.c));
    if (dx.b != dy.b)
        throw shape_error("ada_in: batch mismatch " + std::to_string(dx.b) + " vs " +
                          std::to_string(dy.b));
    check_finite(x, "ada_in");
    check_finite(y, "ada_in");

    Tensor out(x.shape);
    for (long b = 0; b < dx.b; ++b) {
        for (long c = 0; c < dx.c; ++c) {
            const real* xs = x.ptr() + (b * dx.c + c) * dx.s;
            const real* ys = y.ptr() + (b * dy.c + c) * dy.s;
            real mx = 0, sx2 = 0, my = 0, sy2 = 0;
            for (long i = 0; i < dx.s; ++i) {
                mx += xs[i];
                sx2 += xs[i] * xs[i];
            }
            for (long i = 0; i < dy.s; ++i) {
                my += ys[i];
                sy2 += ys[i] * ys[i];
            }
            mx /= static_cast<real>(dx.s);
            my /= static_cast<real>(dy.s);
            const real vx = std::max(real(0), sx2 / static_cast<real>(dx.s) - mx * mx);
            const real vy = std::max(real(0), sy2 / static_cast<real>(dy.s) - my * my);
            if (vx + eps <= real(0))
                throw numeric_error("ada_in: zero-variance content channel " + std::to_string(c));
            const real sgx = std::sqrt(vx + eps);
            const real sgy = std::sqrt(vy + eps);
            real* z = out.ptr() + (b * dx.c + c) * dx.s;
            const real scale = sgy / sgx;
            for (long i = 0; i < dx.s; ++i) z[i] = scale * (xs[i] - mx) + my;
        }
    }
    return out;
}

ChannelStats code_stats(const DomainCode& code, const AdaBNState& state) {
    if (code.values.ndim() < 2)
        throw shape_error("code_stats: code must be (code_channels, *spatial), got " +
                          shape_str(code.values.shape));
    const long kc = code.values.dim(0);
    long m = 1;
    for (int i = 1; i < code.values.ndim(); ++i) m *= code.values.dim(i);
    if (state.code_projection.ndim() != 2 || state.code_projection.dim(1) != kc)
        throw shape_error("code_stats: projection expects " +
                          (state.code_projection.ndim() == 2
                               ? std::to_string(state.code_projection.dim(1))
                               : std::string("?")) +
                          " code channels, code has " + std::to_string(kc));
    check_finite(code.values, "code_stats");
    if (state.epsilon <= 0) throw validation_error("code_stats: epsilon must be positive");

    const long c_out = state.code_projection.dim(0);
    ChannelStats st{Tensor({c_out}), Tensor({c_out})};
    std::vector<real> proj(static_cast<std::size_t>(m));
    for (long c = 0; c < c_out; ++c) {
        const real* w = state.code_projection.ptr() + c * kc;
        for (long i = 0; i < m; ++i) {
            real acc = 0;
            for (long k = 0; k < kc; ++k) acc += w[k] * code.values[k * m + i];
            proj[static_cast<std::size_t>(i)] = acc;
        }
        real sum = 0, sq = 0;
        for (long i = 0; i < m; ++i) {
            sum += proj[static_cast<std::size_t>(i)];
            sq += proj[static_cast<std::size_t>(i)] * proj[static_cast<std::size_t>(i)];
        }
        const real mu = sum / static_cast<real>(m);
        const real var = std::max(real(0), sq / static_cast<real>(m) - mu * mu);
        st.mean[c] = mu;
        st.std[c] = std::max(std::sqrt(var), state.epsilon);
    }
    return st;
}

Tensor ada_bn_forward(const Tensor& X, const DomainCode& code, const AdaBNState& state,
                      StatsMode stats_mode) {
    if (stats_mode == StatsMode::Running)
        throw validation_error("ada_bn_forward: stats_mode must be batch or instance");
    const auto d = feature_dims(X, "ada_bn_forward");
    check_affine(state.gamma, d.c, "gamma", "ada_bn_forward");
    check_affine(state.beta, d.c, "beta", "ada_bn_forward");
    check_finite(X, "ada_bn_forward");

    const ChannelStats target = code_stats(code, state);
    if (target.mean.dim(0) != d.c)
        throw shape_error("ada_bn_forward: projection emits " + std::to_string(target.mean.dim(0)) +
                          " channels, features have " + std::to_string(d.c));

    const real eps = state.epsilon;
    Tensor out(X.shape);
    const bool pooled = (stats_mode == StatsMode::Batch);
    const long groups = pooled ? 1 : d.b;
    for (long c = 0; c < d.c; ++c) {
        for (long g = 0; g < groups; ++g) {
            const long b_lo = pooled ? 0 : g;
            const long b_hi = pooled ? d.b : g + 1;
            real sum = 0, sq = 0;
            for (long b = b_lo; b < b_hi; ++b) {
                const real* x = X.ptr() + (b * d.c + c) * d.s;
                for (long i = 0; i < d.s; ++i) {
                    sum += x[i];
                    sq += x[i] * x[i];
                }
            }
            const real n = static_cast<real>((b_hi - b_lo) * d.s);
            const real mu = sum / n;
            const real var = std::max(real(0), sq / n - mu * mu);
            if (var + eps <= real(0))
                throw numeric_error("ada_bn_forward: zero-variance channel " + std::to_string(c) +
                                    " with eps=0");
            const real sigma = std::sqrt(var + eps);
            // z = gamma * (sg_y * xhat + mu_y) + beta
            const real a = state.gamma[c] * target.std[c] / sigma;
            const real s = state.gamma[c] * (target.mean[c] - target.std[c] * mu / sigma) +
                           state.beta[c];
            for (long b = b_lo; b < b_hi; ++b) {
                const real* x = X.ptr() + (b * d.c + c) * d.s;
                real* z = out.ptr() + (b * d.c + c) * d.s;
                for (long i = 0; i < d.s; ++i) z[i] = a * x[i] + s;
            }
        }
    }
    return out;
}

}  // namespace adaseg
