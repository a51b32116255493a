#pragma once

#include "adaseg/layers.hpp"

namespace adaseg {

// Adam over a fixed parameter set. "momentum" in the training config is beta1;
// beta2 and eps follow the usual defaults.
class Adam {
public:
    Adam(const nn::ParamMap& params, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8);

    void step(real lr);

private:
    struct Slot {
        Tensor* value;
        Tensor* grad;
        Tensor m, v;
    };
    std::vector<Slot> slots_;
    real beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace adaseg
