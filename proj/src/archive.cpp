#include "dlens/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dlens/error.hpp"
#include "json.hpp"

namespace dlens {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

using json = nlohmann::json;

const Tensor& TensorArchive::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("missing tensor: " + name);
    return it->second;
}

TensorArchive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open archive " + path.string());

    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8) throw ValidationError("malformed header: " + path.string() + " is too short");

    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (header_len > file_size - 8) {
        throw ValidationError("malformed header: declared length exceeds file size in " + path.string());
    }
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::parse_error& e) {
        throw ValidationError("malformed header in " + path.string() + ": " + e.what());
    }
    if (!header.is_object()) throw ValidationError("malformed header: not a JSON object");

    const uint64_t data_begin = 8 + header_len;
    const uint64_t data_size = file_size - data_begin;

    TensorArchive archive;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : info.items())
                archive.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
            continue;
        }
        try {
            const auto dtype = info.at("dtype").get<std::string>();
            if (dtype != "F32") throw ValidationError("tensor " + name + " has unsupported dtype " + dtype);
            auto shape = info.at("shape").get<std::vector<size_t>>();
            auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
            if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
                throw ValidationError("tensor " + name + " has invalid data_offsets");
            }
            size_t count = 1;
            for (size_t d : shape) count *= d;
            if ((offsets[1] - offsets[0]) != count * sizeof(float)) {
                throw ValidationError("tensor " + name + " byte range does not match its shape");
            }
            std::vector<float> data(count);
            in.seekg(static_cast<std::streamoff>(data_begin + offsets[0]));
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)));
            if (!in) throw ValidationError("short read for tensor " + name);
            archive.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
        } catch (const json::exception& e) {
            throw ValidationError("malformed header entry " + name + ": " + e.what());
        }
    }
    return archive;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    json header = json::object();
    if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
    uint64_t offset = 0;
    for (const auto& [name, t] : archive.tensors) {
        const uint64_t bytes = t.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    // Pad to 8-byte alignment as the reference writer does.
    while (text.size() % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write archive " + path.string());
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors)
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace dlens
