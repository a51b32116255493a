#pragma once

#include <filesystem>

#include "adaseg/tensor.hpp"

namespace adaseg {

// Single-tensor array container (".arr"): a small header followed by raw
// little-endian payload. Images are float32, masks uint8.
//
//   bytes 0..3   magic "ARR1"
//   byte  4      dtype: 0 = float32, 1 = uint8
//   byte  5      ndim
//   bytes 6..7   reserved (zero)
//   then ndim x int64 dims, then the payload, row-major.

enum class ArrDtype : std::uint8_t { F32 = 0, U8 = 1 };

struct ArrHeader {
    ArrDtype dtype;
    Shape shape;
};

void save_arr(const std::filesystem::path& path, const Tensor& t);
void save_arr(const std::filesystem::path& path, const ByteTensor& t);

ArrHeader peek_arr(const std::filesystem::path& path);
Tensor load_arr_f32(const std::filesystem::path& path);
ByteTensor load_arr_u8(const std::filesystem::path& path);

}  // namespace adaseg
