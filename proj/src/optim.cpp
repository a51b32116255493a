#include "adaseg/optim.hpp"

#include <cmath>

namespace adaseg {

Adam::Adam(const nn::ParamMap& params, real beta1, real beta2, real eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params) {
        if (!p.trainable || !p.grad) continue;
        slots_.push_back({p.value, p.grad, Tensor(p.value->shape), Tensor(p.value->shape)});
    }
}

void Adam::step(real lr) {
    note_grad_op();
    ++t_;
    const real bc1 = real(1) - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = real(1) - std::pow(beta2_, static_cast<real>(t_));
    for (auto& s : slots_) {
        for (long i = 0; i < s.value->numel(); ++i) {
            const real g = (*s.grad)[i];
            s.m[i] = beta1_ * s.m[i] + (real(1) - beta1_) * g;
            s.v[i] = beta2_ * s.v[i] + (real(1) - beta2_) * g * g;
            const real mhat = s.m[i] / bc1;
            const real vhat = s.v[i] / bc2;
            (*s.value)[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace adaseg
