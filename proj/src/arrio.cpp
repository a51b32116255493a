#include "adaseg/arrio.hpp"

#include <cstring>
#include <fstream>

namespace adaseg {

namespace {

constexpr char kMagic[4] = {'A', 'R', 'R', '1'};

void write_header(std::ofstream& f, ArrDtype dtype, const Shape& shape) {
    f.write(kMagic, 4);
    const std::uint8_t dt = static_cast<std::uint8_t>(dtype);
    const std::uint8_t nd = static_cast<std::uint8_t>(shape.size());
    const std::uint8_t zero[2] = {0, 0};
    f.write(reinterpret_cast<const char*>(&dt), 1);
    f.write(reinterpret_cast<const char*>(&nd), 1);
    f.write(reinterpret_cast<const char*>(zero), 2);
    for (long d : shape) {
        const std::int64_t v = d;
        f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

ArrHeader read_header(std::ifstream& f, const std::filesystem::path& path) {
    char magic[4];
    std::uint8_t dt = 0, nd = 0, pad[2];
    if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw io_error("not an .arr file: " + path.string());
    f.read(reinterpret_cast<char*>(&dt), 1);
    f.read(reinterpret_cast<char*>(&nd), 1);
    f.read(reinterpret_cast<char*>(pad), 2);
    if (!f || dt > 1) throw io_error("corrupt .arr header: " + path.string());
    ArrHeader h;
    h.dtype = static_cast<ArrDtype>(dt);
    h.shape.resize(nd);
    for (std::uint8_t i = 0; i < nd; ++i) {
        std::int64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), sizeof(v));
        h.shape[i] = static_cast<long>(v);
    }
    if (!f) throw io_error("corrupt .arr header: " + path.string());
    return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string());
    return f;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot write " + path.string());
    return f;
}

}  // namespace

void save_arr(const std::filesystem::path& path, const Tensor& t) {
    auto f = open_out(path);
    write_header(f, ArrDtype::F32, t.shape);
    std::vector<float> buf(t.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw io_error("write failed: " + path.string());
}

void save_arr(const std::filesystem::path& path, const ByteTensor& t) {
    auto f = open_out(path);
    write_header(f, ArrDtype::U8, t.shape);
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size()));
    if (!f) throw io_error("write failed: " + path.string());
}

ArrHeader peek_arr(const std::filesystem::path& path) {
    auto f = open_in(path);
    return read_header(f, path);
}

Tensor load_arr_f32(const std::filesystem::path& path) {
    auto f = open_in(path);
    ArrHeader h = read_header(f, path);
    if (h.dtype != ArrDtype::F32)
        throw io_error("expected float32 tensor in " + path.string());
    Tensor t(h.shape);
    std::vector<float> buf(t.data.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw io_error("truncated .arr payload: " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<real>(buf[i]);
    return t;
}

ByteTensor load_arr_u8(const std::filesystem::path& path) {
    auto f = open_in(path);
    ArrHeader h = read_header(f, path);
    if (h.dtype != ArrDtype::U8)
        throw io_error("expected uint8 tensor in " + path.string());
    ByteTensor t(h.shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size()));
    if (!f) throw io_error("truncated .arr payload: " + path.string());
    return t;
}

}  // namespace adaseg
