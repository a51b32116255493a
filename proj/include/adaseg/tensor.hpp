#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "adaseg/common.hpp"

namespace adaseg {

using Shape = std::vector<long>;

long numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major real tensor. Feature maps use (batch, channels, *spatial)
// with *spatial = (H, W) or (D, H, W); weights use their natural layout.
struct Tensor {
    Shape shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), real(0)) {}
    Tensor(Shape s, real fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
    Tensor(Shape s, std::vector<real> values);

    long numel() const { return static_cast<long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    long dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    real* ptr() { return data.data(); }
    const real* ptr() const { return data.data(); }
    real& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
    real operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

    void fill(real v) { std::fill(data.begin(), data.end(), v); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

// Integer label masks (values are class ids < 256, matching the on-disk u8 format).
struct ByteTensor {
    Shape shape;
    std::vector<std::uint8_t> data;

    ByteTensor() = default;
    explicit ByteTensor(Shape s) : shape(std::move(s)), data(numel_of(shape), 0) {}

    long numel() const { return static_cast<long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    long dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool same_shape(const ByteTensor& other) const { return shape == other.shape; }
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace adaseg
