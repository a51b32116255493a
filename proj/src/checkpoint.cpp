#include "adaseg/checkpoint.hpp"

#include <fstream>

#include "adaseg/common.hpp"

namespace adaseg {

namespace {

std::vector<float> to_f32(const Tensor& t) {
    std::vector<float> out(t.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.data[i]);
    return out;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

std::string Checkpoint::fingerprint() const {
    Fnv1a h;
    for (const auto& [name, t] : tensors) {
        h.update(name);
        for (long d : t.shape) {
            const std::int64_t v = d;
            h.update(&v, sizeof(v));
        }
        const auto f32 = to_f32(t);
        h.update(f32.data(), f32.size() * sizeof(float));
    }
    return hex64(h.value());
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    std::filesystem::create_directories(dir);

    nlohmann::json table = nlohmann::json::array();
    std::int64_t offset = 0;
    {
        std::ofstream wf(dir / "weights.bin", std::ios::binary | std::ios::trunc);
        if (!wf) throw io_error("cannot write " + (dir / "weights.bin").string());
        for (const auto& [name, t] : ckpt.tensors) {
            nlohmann::json row;
            row["name"] = name;
            row["shape"] = t.shape;
            row["offset"] = offset;
            table.push_back(row);
            const auto f32 = to_f32(t);
            wf.write(reinterpret_cast<const char*>(f32.data()),
                     static_cast<std::streamsize>(f32.size() * sizeof(float)));
            offset += static_cast<std::int64_t>(f32.size() * sizeof(float));
        }
        if (!wf) throw io_error("write failed: " + (dir / "weights.bin").string());
    }

    nlohmann::json m;
    m["format_version"] = 1;
    m["kind"] = ckpt.kind;
    m["arch"] = ckpt.arch;
    if (!ckpt.dpg_fingerprint.empty()) m["dpg_fingerprint"] = ckpt.dpg_fingerprint;
    m["fingerprint"] = ckpt.fingerprint();
    m["metadata"] = ckpt.metadata;
    m["tensors"] = table;

    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw io_error("cannot write " + (dir / "manifest.json").string());
    mf << m.dump(2) << "\n";
    if (!mf) throw io_error("write failed: " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw io_error("cannot open " + (dir / "manifest.json").string());
    nlohmann::json m;
    try {
        mf >> m;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("corrupt checkpoint manifest " + (dir / "manifest.json").string() + ": " +
                       e.what());
    }

    Checkpoint ckpt;
    ckpt.kind = m.at("kind").get<std::string>();
    ckpt.arch = m.at("arch");
    ckpt.dpg_fingerprint = m.value("dpg_fingerprint", std::string());
    ckpt.metadata = m.value("metadata", nlohmann::json::object());

    std::ifstream wf(dir / "weights.bin", std::ios::binary);
    if (!wf) throw io_error("cannot open " + (dir / "weights.bin").string());
    for (const auto& row : m.at("tensors")) {
        const std::string name = row.at("name").get<std::string>();
        const Shape shape = row.at("shape").get<Shape>();
        const std::int64_t offset = row.at("offset").get<std::int64_t>();
        Tensor t(shape);
        std::vector<float> buf(static_cast<std::size_t>(t.numel()));
        wf.seekg(offset);
        wf.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!wf)
            throw io_error("truncated weights.bin reading tensor " + name + " in " + dir.string());
        for (std::size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<real>(buf[i]);
        ckpt.tensors.emplace_back(name, std::move(t));
    }

    const std::string recorded = m.value("fingerprint", std::string());
    if (!recorded.empty() && recorded != ckpt.fingerprint())
        throw io_error("checkpoint fingerprint mismatch in " + dir.string() +
                       " (weights.bin does not match manifest)");
    return ckpt;
}

}  // namespace adaseg
