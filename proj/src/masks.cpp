#include "dlens/masks.hpp"

#include "dlens/archive.hpp"
#include "dlens/error.hpp"

namespace dlens {

MaskSet MaskSet::filled(const SvdCache& cache, float value) {
    MaskSet s;
    for (const auto& [id, f] : cache) s.masks.emplace(id, Tensor::vector(f.rank(), value));
    return s;
}

const Tensor& MaskSet::at(const ComponentId& id) const {
    auto it = masks.find(id);
    if (it == masks.end()) throw ValidationError("mask set has no entry for " + id.str());
    return it->second;
}

size_t MaskSet::total_directions() const {
    size_t n = 0;
    for (const auto& [id, m] : masks) n += m.size();
    return n;
}

double MaskSet::l1() const {
    double s = 0.0;
    for (const auto& [id, m] : masks)
        for (float v : m.values()) s += std::abs(v);
    return s;
}

bool MaskSet::in_range() const {
    for (const auto& [id, m] : masks)
        for (float v : m.values())
            if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
}

void MaskSet::check_against(const SvdCache& cache) const {
    for (const auto& [id, f] : cache) {
        const Tensor& m = at(id);
        if (m.size() != f.rank()) {
            throw ValidationError("mask for " + id.str() + " has length " + std::to_string(m.size()) + ", rank is " +
                                  std::to_string(f.rank()));
        }
    }
    for (const auto& [id, m] : masks)
        if (!cache.count(id)) throw ValidationError("mask for " + id.str() + " has no SVD factors");
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& p) {
    auto s = p;
    return s.replace_extension(".json");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MaskCheckpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    TensorArchive a;
    for (const auto& [id, m] : ckpt.masks.masks) a.tensors[id.str()] = m;
    a.metadata["task"] = ckpt.task;
    write_archive(path, a);
    Json side;
    side["task"] = ckpt.task;
    side["config"] = ckpt.config;
    side["epoch"] = ckpt.epoch;
    side["val_kl"] = ckpt.val_kl;
    write_json(sidecar(path), side);
}

MaskCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const TensorArchive a = read_archive(path);
    MaskCheckpoint c;
    for (const auto& [name, t] : a.tensors) c.masks.masks.emplace(ComponentId::parse(name), t.reshaped({t.size()}));
    if (!c.masks.in_range()) throw ValidationError("mask checkpoint " + path.string() + " has values outside [0,1]");
    const auto side_path = sidecar(path);
    if (std::filesystem::exists(side_path)) {
        const Json side = read_json(side_path);
        c.task = side.value("task", std::string());
        if (side.contains("config")) c.config = side["config"];
        c.epoch = side.value("epoch", size_t{0});
        c.val_kl = side.value("val_kl", 0.0);
    }
    return c;
}

}  // namespace dlens
