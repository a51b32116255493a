#include "adaseg/tensor.hpp"

#include <cmath>
#include <sstream>

namespace adaseg {

long numel_of(const Shape& shape) {
    long n = 1;
    for (long d : shape) {
        if (d < 0) throw shape_error("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<real> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel_of(shape) != static_cast<long>(data.size()))
        throw shape_error("tensor value count " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
}

bool Tensor::all_finite() const {
    for (real v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw shape_error(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                          " vs " + shape_str(b.shape));
}

}  // namespace adaseg
