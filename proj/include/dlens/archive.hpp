#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dlens/tensor.hpp"

namespace dlens {

// Flat tensor archive in the safetensors layout: u64 little-endian header
// length, a JSON header {name: {dtype, shape, data_offsets}}, then raw
// little-endian F32 bytes. Only F32 tensors are supported.
struct TensorArchive {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

TensorArchive read_archive(const std::filesystem::path& path);
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);

}  // namespace dlens
