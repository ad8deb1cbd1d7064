#include "dlens/model_dir.hpp"

#include "dlens/error.hpp"

namespace dlens {

std::string tensor_checksum(const Tensor& t) {
    const std::string_view bytes(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
    return hex64(fnv1a(bytes));
}

ExportManifest ExportManifest::from_json(const Json& j) {
    if (!j.is_object() || !j.contains("tensors") || !j["tensors"].is_object())
        throw ValidationError("manifest: expected an object with a 'tensors' map");
    ExportManifest m;
    if (j.contains("source")) {
        m.model_id = j["source"].value("model_id", "");
        m.revision = j["source"].value("revision", "");
    }
    for (const auto& [name, e] : j["tensors"].items()) {
        if (!e.is_object() || !e.contains("shape") || !e.contains("checksum"))
            throw ValidationError("manifest: tensor '" + name + "' needs shape and checksum");
        ManifestEntry me;
        me.shape = e["shape"].get<std::vector<size_t>>();
        me.dtype = e.value("dtype", "F32");
        me.checksum = e["checksum"].get<std::string>();
        m.tensors[name] = me;
    }
    if (j.contains("files"))
        for (const auto& [name, h] : j["files"].items()) m.files[name] = h.get<std::string>();
    return m;
}

Json ExportManifest::to_json() const {
    Json j;
    j["source"] = {{"model_id", model_id}, {"revision", revision}};
    j["checksum_algorithm"] = "fnv1a64";
    Json t = Json::object();
    for (const auto& [name, e] : tensors) t[name] = {{"shape", e.shape}, {"dtype", e.dtype}, {"checksum", e.checksum}};
    j["tensors"] = t;
    Json f = Json::object();
    for (const auto& [name, h] : files) f[name] = h;
    j["files"] = f;
    return j;
}

ExportManifest build_manifest(const TensorArchive& archive, const std::filesystem::path& dir, const std::string& model_id,
                              const std::string& revision) {
    ExportManifest m;
    m.model_id = model_id;
    m.revision = revision;
    for (const auto& [name, t] : archive.tensors) m.tensors[name] = {t.shape(), "F32", tensor_checksum(t)};
    for (const char* f : {"vocab.json", "merges.txt"})
        if (std::filesystem::exists(dir / f)) m.files[f] = hex64(fnv1a_file(dir / f));
    return m;
}

std::vector<std::string> required_tensor_names(const ModelConfig& c) {
    std::vector<std::string> names{"wte.weight", "wpe.weight"};
    for (size_t l = 0; l < c.n_layers; ++l) {
        for (const char* s : {"ln_1.weight", "ln_1.bias", "attn.c_attn.weight", "attn.c_attn.bias",
                              "attn.c_proj.weight", "attn.c_proj.bias", "ln_2.weight", "ln_2.bias", "mlp.c_fc.weight",
                              "mlp.c_fc.bias", "mlp.c_proj.weight", "mlp.c_proj.bias"})
            names.push_back("h." + std::to_string(l) + "." + s);
    }
    names.push_back("ln_f.weight");
    names.push_back("ln_f.bias");
    return names;
}

namespace {

const Tensor* find_tensor(const TensorArchive& a, const std::string& name) {
    if (auto it = a.tensors.find(name); it != a.tensors.end()) return &it->second;
    if (auto it = a.tensors.find("transformer." + name); it != a.tensors.end()) return &it->second;
    return nullptr;
}

}  // namespace

void verify_manifest(const ExportManifest& m, const TensorArchive& archive, const std::filesystem::path& dir) {
    for (const auto& [name, e] : m.tensors) {
        const Tensor* t = find_tensor(archive, name);
        if (!t) throw ValidationError("manifest: tensor '" + name + "' missing from archive");
        if (e.dtype != "F32") throw ValidationError("manifest: tensor '" + name + "' has dtype " + e.dtype);
        if (t->shape() != e.shape) throw ValidationError("manifest: shape mismatch for '" + name + "'");
        if (tensor_checksum(*t) != e.checksum) throw ValidationError("manifest: checksum mismatch for '" + name + "'");
    }
    for (const auto& [file, h] : m.files) {
        if (!std::filesystem::exists(dir / file)) throw ValidationError("manifest: file '" + file + "' missing");
        if (hex64(fnv1a_file(dir / file)) != h) throw ValidationError("manifest: hash mismatch for '" + file + "'");
    }
}

ModelBundle load_model_dir(const std::filesystem::path& dir) {
    for (const char* f : {"model.safetensors", "config.json", "vocab.json", "merges.txt"})
        if (!std::filesystem::exists(dir / f))
            throw ValidationError("model directory " + dir.string() + " is missing " + f);
    const ModelConfig config = read_config(dir / "config.json");
    TensorArchive archive = read_archive(dir / "model.safetensors");
    if (std::filesystem::exists(dir / "manifest.json")) {
        const auto m = ExportManifest::from_json(read_json(dir / "manifest.json"));
        for (const auto& name : required_tensor_names(config))
            if (!m.tensors.count(name) && !m.tensors.count("transformer." + name))
                throw ValidationError("manifest: required tensor '" + name + "' not listed");
        verify_manifest(m, archive, dir);
    }
    Weights w = weights_from_archive(archive, config);
    BpeVocab vocab = BpeVocab::load(dir / "vocab.json", dir / "merges.txt");
    if (vocab.size() != config.vocab_size)
        throw ValidationError("vocab.json has " + std::to_string(vocab.size()) + " entries, config says " +
                              std::to_string(config.vocab_size));
    return {std::move(w), std::move(vocab), dir};
}

void write_model_dir(const std::filesystem::path& dir, const Weights& weights, const BpeVocab& vocab,
                     const std::string& model_id) {
    std::filesystem::create_directories(dir);
    const TensorArchive archive = weights_to_archive(weights);
    write_archive(dir / "model.safetensors", archive);
    write_config(dir / "config.json", weights.config);
    vocab.save(dir / "vocab.json", dir / "merges.txt");
    write_json(dir / "manifest.json", build_manifest(archive, dir, model_id, "local").to_json());
}

}  // namespace dlens
