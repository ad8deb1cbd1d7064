#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dlens/decomposition.hpp"
#include "dlens/tensor.hpp"
#include "dlens/util.hpp"

namespace dlens {

// One mask vector per decomposed component, values in [0,1].
struct MaskSet {
    std::map<ComponentId, Tensor> masks;

    // Every component of `cache` set to `value`.
    static MaskSet filled(const SvdCache& cache, float value);

    const Tensor& at(const ComponentId& id) const;
    size_t total_directions() const;
    double l1() const;
    bool in_range() const;
    // Throws ValidationError unless the keys and lengths match `cache`.
    void check_against(const SvdCache& cache) const;
};

struct MaskCheckpoint {
    MaskSet masks;
    std::string task;
    Json config = Json::object();
    size_t epoch = 0;
    double val_kl = 0.0;
};

// Archive of mask vectors keyed by component id, plus a JSON sidecar
// {task, config, epoch, val_kl} at `path` with extension .json.
void save_checkpoint(const std::filesystem::path& path, const MaskCheckpoint& ckpt);
MaskCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dlens
