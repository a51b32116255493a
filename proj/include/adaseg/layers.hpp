#pragma once

#include <random>
#include <string>
#include <vector>

#include "adaseg/norm.hpp"
#include "adaseg/tensor.hpp"

namespace adaseg {
namespace nn {

// Named view into a layer's tensors. Buffers (running statistics) are
// non-trainable but still serialized with checkpoints.
struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;  // null for buffers
    bool trainable;
};
using ParamMap = std::vector<ParamRef>;

// ----------------------------------------------------------------------------
// Convolution: stride 1, odd kernel, zero padding preserving spatial size.
// Works for 2 or 3 spatial dims. Weight layout (cout, cin * k^nd) row-major.
// ----------------------------------------------------------------------------
class Conv {
public:
    Conv() = default;
    Conv(long cin, long cout, int kernel, int nd);

    Tensor forward(const Tensor& x) const;
    Tensor backward_data(const Tensor& dy) const;
    // Accumulates dw/db from the forward input x and upstream dy.
    void backward_param(const Tensor& dy, const Tensor& x);

    void init_he(std::mt19937_64& rng);
    void collect(const std::string& prefix, ParamMap& out);
    void zero_grad();

    long cin() const { return cin_; }
    long cout() const { return cout_; }

    Tensor w, b, dw, db;

private:
    long cin_ = 0, cout_ = 0;
    int k_ = 3, nd_ = 2;
};

// ----------------------------------------------------------------------------
// Max pooling, window 2 stride 2 over every spatial axis.
// ----------------------------------------------------------------------------
struct MaxPool {
    // argmax holds, per output element, the flat input index within its (b,c) slice.
    static Tensor forward(const Tensor& x, std::vector<long>& argmax);
    static Tensor backward(const Tensor& dy, const std::vector<long>& argmax,
                           const Shape& input_shape);
};

// ----------------------------------------------------------------------------
// Linear (bilinear / trilinear) x2 upsampling, align_corners=false.
// ----------------------------------------------------------------------------
struct Upsample {
    static Tensor forward(const Tensor& x);
    static Tensor backward(const Tensor& dy, const Shape& input_shape);
};

struct Relu {
    static Tensor forward(const Tensor& x);
    // y is the cached forward output.
    static Tensor backward(const Tensor& dy, const Tensor& y);
};

// ----------------------------------------------------------------------------
// Plain batch normalization with running statistics.
// ----------------------------------------------------------------------------
class BatchNorm {
public:
    BatchNorm() = default;
    explicit BatchNorm(long channels);

    struct Cache {
        Tensor xhat;
        std::vector<real> inv_std;  // one per pooled group
        StatsMode mode = StatsMode::Batch;
        long b = 0, c = 0, s = 0;
    };

    Tensor forward(const Tensor& x, StatsMode mode, bool update_running, Cache* cache);
    Tensor backward(const Tensor& dy, const Cache& cache);

    void collect(const std::string& prefix, ParamMap& out);
    void zero_grad();
    long channels() const { return channels_; }

    Tensor gamma, beta, dgamma, dbeta;
    Tensor running_mean, running_var;
    real eps = 1e-5;
    real momentum = 0.1;

private:
    long channels_ = 0;
};

// ----------------------------------------------------------------------------
// Adaptive batch normalization: normalizes features to the statistics of a
// projected domain code, then applies the learned affine.
// ----------------------------------------------------------------------------
class AdaBN {
public:
    AdaBN() = default;
    AdaBN(long channels, long code_channels);

    struct Cache {
        Tensor xhat;                // (B, C, S)
        std::vector<real> inv_std;  // per pooled group
        Tensor proj_map;            // (B, C, M)
        Tensor mu_y, sg_y;          // (B, C)
        std::vector<real> sg_y_raw;
        std::vector<const Tensor*> code_values;  // per instance; owned by the caller
        StatsMode mode = StatsMode::Batch;
        long b = 0, c = 0, s = 0, m = 0;
    };

    // codes: one per batch instance, or a single code broadcast across the batch.
    // Caller keeps the code tensors alive until backward has run.
    Tensor forward(const Tensor& x, const std::vector<const Tensor*>& codes, StatsMode mode,
                   bool update_running, Cache* cache);
    Tensor backward(const Tensor& dy, const Cache& cache);

    void collect(const std::string& prefix, ParamMap& out);
    void zero_grad();
    long channels() const { return channels_; }
    long code_channels() const { return code_channels_; }

    void init_projection(std::mt19937_64& rng);

    Tensor gamma, beta, proj;
    Tensor dgamma, dbeta, dproj;
    // Optional running statistics of X (config alternative, default unused).
    Tensor running_mean, running_var;
    bool track_running = false;
    real eps = 1e-5;
    real momentum = 0.1;

private:
    long channels_ = 0, code_channels_ = 0;
};

// Channel concatenation (axis 1) and its gradient split.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& dy, long c_a, Tensor& da, Tensor& db);

}  // namespace nn
}  // namespace adaseg
