#include "mdf/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mdf/error.hpp"

namespace mdf {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void append_section(nlohmann::ordered_json& tensors, std::string& data, const NamedTensors& src, const char* kind) {
    for (const auto& [name, t] : src) {
        if (tensors.contains(name)) throw Error(Errc::bad_checkpoint, "duplicate tensor name '" + name + "'");
        tensors[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"offset", data.size()}, {"kind", kind}};
        for (double v : t.data()) put_u32(data, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const nlohmann::json& meta) {
    nlohmann::ordered_json manifest;
    manifest["format"] = "MDF1";
    manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    manifest["tensors"] = nlohmann::ordered_json::object();
    std::string data;
    append_section(manifest["tensors"], data, store.params, "param");
    append_section(manifest["tensors"], data, store.buffers, "buffer");

    const std::string text = manifest.dump();
    std::string bytes(kCheckpointMagic, 4);
    put_u64(bytes, text.size());
    bytes += text;
    bytes += data;

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_failure, "cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw Error(Errc::bad_checkpoint, path.string() + " is not an MDF1 checkpoint");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t manifest_len = get_u64(raw + 4);
    if (12 + manifest_len > bytes.size()) throw Error(Errc::bad_checkpoint, "truncated manifest in " + path.string());

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(12, manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::bad_checkpoint, std::string("manifest is not valid JSON: ") + e.what());
    }
    const std::size_t data_start = 12 + manifest_len;

    Checkpoint ck;
    if (manifest.contains("meta")) ck.meta = manifest["meta"];
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
        if (entry.value("dtype", "") != "f32") throw Error(Errc::bad_checkpoint, "unsupported dtype for '" + name + "'");
        auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const std::size_t count = shape_numel(shape);
        if (data_start + offset + 4 * count > bytes.size()) {
            throw Error(Errc::bad_checkpoint, "tensor '" + name + "' runs past end of file");
        }
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            values[i] = static_cast<double>(std::bit_cast<float>(get_u32(raw + data_start + offset + 4 * i)));
        }
        Tensor t(std::move(shape), std::move(values));
        if (entry.value("kind", "param") == "buffer") {
            ck.store.buffers.emplace(name, std::move(t));
        } else {
            ck.store.params.emplace(name, std::move(t));
        }
    }
    return ck;
}

}  // namespace mdf
