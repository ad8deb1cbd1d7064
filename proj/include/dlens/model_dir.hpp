#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dlens/archive.hpp"
#include "dlens/model.hpp"
#include "dlens/tokenizer.hpp"
#include "dlens/util.hpp"

namespace dlens {

// A model directory holds model.safetensors, config.json, vocab.json,
// merges.txt and optionally manifest.json.
struct ModelBundle {
    Weights weights;
    BpeVocab vocab;
    std::filesystem::path dir;
};

struct ManifestEntry {
    std::vector<size_t> shape;
    std::string dtype = "F32";
    std::string checksum;  // 16 hex digits, FNV-1a 64 of the raw little-endian bytes
};

struct ExportManifest {
    std::string model_id, revision;
    std::map<std::string, ManifestEntry> tensors;
    std::map<std::string, std::string> files;  // vocab.json / merges.txt -> FNV-1a 64 of file bytes

    static ExportManifest from_json(const Json& j);
    Json to_json() const;
};

std::string tensor_checksum(const Tensor& t);
ExportManifest build_manifest(const TensorArchive& archive, const std::filesystem::path& dir, const std::string& model_id,
                              const std::string& revision);

// Names the loader needs for `config` (lm_head.* are optional and excluded).
std::vector<std::string> required_tensor_names(const ModelConfig& config);

// Throws ValidationError naming the first mismatch: missing required tensor,
// shape/dtype/checksum mismatch, or tokenizer file hash mismatch.
void verify_manifest(const ExportManifest& m, const TensorArchive& archive, const std::filesystem::path& dir);

// Verifies manifest.json when present.
ModelBundle load_model_dir(const std::filesystem::path& dir);
void write_model_dir(const std::filesystem::path& dir, const Weights& weights, const BpeVocab& vocab,
                     const std::string& model_id = "toy");

}  // namespace dlens
