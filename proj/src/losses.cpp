#include "adaseg/losses.hpp"

#include <cmath>

namespace adaseg {

namespace {

struct LossDims {
    long b, k, s;
};

LossDims loss_dims(const Tensor& pred, const Tensor& target, const char* where) {
    require_same_shape(pred, target, where);
    if (pred.ndim() < 3)
        throw shape_error(std::string(where) + ": expected (batch, classes, *spatial), got " +
                          shape_str(pred.shape));
    LossDims d{pred.dim(0), pred.dim(1), 1};
    for (int i = 2; i < pred.ndim(); ++i) d.s *= pred.dim(i);
    return d;
}

real stable_bce(real z, real t) {
    return std::max(z, real(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

real dice_loss(const Tensor& probs, const Tensor& target, real eps) {
    const auto d = loss_dims(probs, target, "dice_loss");
    if (d.k < 2) throw shape_error("dice_loss: need background + foreground channels");
    real total = 0;
    for (long b = 0; b < d.b; ++b) {
        for (long c = 1; c < d.k; ++c) {
            const real* p = probs.ptr() + (b * d.k + c) * d.s;
            const real* t = target.ptr() + (b * d.k + c) * d.s;
            real inter = 0, ps = 0, ts = 0;
            for (long i = 0; i < d.s; ++i) {
                inter += p[i] * t[i];
                ps += p[i];
                ts += t[i];
            }
            total += real(1) - (2 * inter + eps) / (ps + ts + eps);
        }
    }
    return total / static_cast<real>(d.b * (d.k - 1));
}

Tensor dice_loss_grad(const Tensor& probs, const Tensor& target, real eps) {
    const auto d = loss_dims(probs, target, "dice_loss");
    Tensor g(probs.shape);
    const real norm = real(1) / static_cast<real>(d.b * (d.k - 1));
    for (long b = 0; b < d.b; ++b) {
        for (long c = 1; c < d.k; ++c) {
            const real* p = probs.ptr() + (b * d.k + c) * d.s;
            const real* t = target.ptr() + (b * d.k + c) * d.s;
            real inter = 0, ps = 0, ts = 0;
            for (long i = 0; i < d.s; ++i) {
                inter += p[i] * t[i];
                ps += p[i];
                ts += t[i];
            }
            const real den = ps + ts + eps;
            real* gp = g.ptr() + (b * d.k + c) * d.s;
            // d/dp of -(2I+eps)/den = -(2*t*den - (2I+eps)) / den^2
            for (long i = 0; i < d.s; ++i)
                gp[i] = norm * (-(2 * t[i] * den - (2 * inter + eps)) / (den * den));
        }
    }
    return g;
}

real bce_loss(const Tensor& logits, const Tensor& target) {
    require_same_shape(logits, target, "bce_loss");
    real total = 0;
    for (long i = 0; i < logits.numel(); ++i) total += stable_bce(logits[i], target[i]);
    return total / static_cast<real>(logits.numel());
}

Tensor bce_loss_grad(const Tensor& logits, const Tensor& target) {
    require_same_shape(logits, target, "bce_loss");
    Tensor g(logits.shape);
    const real norm = real(1) / static_cast<real>(logits.numel());
    for (long i = 0; i < logits.numel(); ++i) {
        const real p = real(1) / (real(1) + std::exp(-logits[i]));
        g[i] = norm * (p - target[i]);
    }
    return g;
}

real softmax_ce_loss(const Tensor& logits, const Tensor& target) {
    const auto d = loss_dims(logits, target, "softmax_ce_loss");
    real total = 0;
    for (long b = 0; b < d.b; ++b) {
        for (long i = 0; i < d.s; ++i) {
            real zmax = -1e300;
            for (long c = 0; c < d.k; ++c)
                zmax = std::max(zmax, logits[(b * d.k + c) * d.s + i]);
            real lse = 0;
            for (long c = 0; c < d.k; ++c)
                lse += std::exp(logits[(b * d.k + c) * d.s + i] - zmax);
            lse = std::log(lse) + zmax;
            for (long c = 0; c < d.k; ++c) {
                const real t = target[(b * d.k + c) * d.s + i];
                if (t != real(0)) total += t * (lse - logits[(b * d.k + c) * d.s + i]);
            }
        }
    }
    return total / static_cast<real>(d.b * d.s);
}

Tensor softmax_ce_loss_grad(const Tensor& logits, const Tensor& target) {
    const auto d = loss_dims(logits, target, "softmax_ce_loss");
    Tensor g = softmax_channels(logits);
    const real norm = real(1) / static_cast<real>(d.b * d.s);
    for (long i = 0; i < g.numel(); ++i) g[i] = norm * (g[i] - target[i]);
    return g;
}

real combined_loss(const Tensor& logits, const Tensor& target, real lambda, real eps_dice,
                   BceMode mode) {
    const real bce = (mode == BceMode::Sigmoid) ? bce_loss(logits, target)
                                                : softmax_ce_loss(logits, target);
    return lambda * bce + dice_loss(sigmoid(logits), target, eps_dice);
}

Tensor combined_loss_grad(const Tensor& logits, const Tensor& target, real lambda, real eps_dice,
                          BceMode mode) {
    Tensor p = sigmoid(logits);
    Tensor g = dice_loss_grad(p, target, eps_dice);
    for (long i = 0; i < g.numel(); ++i) g[i] *= p[i] * (real(1) - p[i]);  // through sigmoid
    Tensor gb = (mode == BceMode::Sigmoid) ? bce_loss_grad(logits, target)
                                           : softmax_ce_loss_grad(logits, target);
    for (long i = 0; i < g.numel(); ++i) g[i] += lambda * gb[i];
    return g;
}

real cosine_lr(long step, long total_steps, real lr_max, real lr_min) {
    if (total_steps <= 0) return lr_min;
    const real frac = static_cast<real>(step) / static_cast<real>(total_steps);
    return lr_min + real(0.5) * (lr_max - lr_min) * (real(1) + std::cos(M_PI * frac));
}

real mse_loss(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse_loss");
    real total = 0;
    for (long i = 0; i < pred.numel(); ++i) {
        const real d = pred[i] - target[i];
        total += d * d;
    }
    return total / static_cast<real>(pred.numel());
}

Tensor mse_loss_grad(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse_loss");
    Tensor g(pred.shape);
    const real norm = real(2) / static_cast<real>(pred.numel());
    for (long i = 0; i < pred.numel(); ++i) g[i] = norm * (pred[i] - target[i]);
    return g;
}

Tensor one_hot(const ByteTensor& mask, long num_classes) {
    if (mask.ndim() < 2)
        throw shape_error("one_hot: expected (batch, *spatial) mask, got " +
                          shape_str(mask.shape));
    const long b = mask.dim(0);
    long s = 1;
    for (int i = 1; i < mask.ndim(); ++i) s *= mask.dim(i);
    Shape out_shape;
    out_shape.push_back(b);
    out_shape.push_back(num_classes);
    for (int i = 1; i < mask.ndim(); ++i) out_shape.push_back(mask.dim(i));
    Tensor out(out_shape);
    for (long bi = 0; bi < b; ++bi) {
        for (long i = 0; i < s; ++i) {
            const long cls = mask.data[static_cast<std::size_t>(bi * s + i)];
            if (cls >= num_classes)
                throw validation_error("one_hot: label " + std::to_string(cls) +
                                       " out of range for " + std::to_string(num_classes) +
                                       " classes");
            out[(bi * num_classes + cls) * s + i] = real(1);
        }
    }
    return out;
}

Tensor sigmoid(const Tensor& logits) {
    Tensor p(logits.shape);
    for (long i = 0; i < logits.numel(); ++i)
        p[i] = real(1) / (real(1) + std::exp(-logits[i]));
    return p;
}

Tensor softmax_channels(const Tensor& logits) {
    if (logits.ndim() < 3)
        throw shape_error("softmax_channels: expected (batch, classes, *spatial)");
    const long b = logits.dim(0), k = logits.dim(1);
    long s = 1;
    for (int i = 2; i < logits.ndim(); ++i) s *= logits.dim(i);
    Tensor p(logits.shape);
    for (long bi = 0; bi < b; ++bi) {
        for (long i = 0; i < s; ++i) {
            real zmax = -1e300;
            for (long c = 0; c < k; ++c) zmax = std::max(zmax, logits[(bi * k + c) * s + i]);
            real sum = 0;
            for (long c = 0; c < k; ++c) {
                const real e = std::exp(logits[(bi * k + c) * s + i] - zmax);
                p[(bi * k + c) * s + i] = e;
                sum += e;
            }
            for (long c = 0; c < k; ++c) p[(bi * k + c) * s + i] /= sum;
        }
    }
    return p;
}

}  // namespace adaseg
