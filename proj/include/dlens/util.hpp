#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace dlens {

using Json = nlohmann::ordered_json;

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data, std::uint64_t seed = kFnvOffset);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

std::string read_text(const std::filesystem::path& path);
// Creates parent directories.
void write_text(const std::filesystem::path& path, std::string_view text);
Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);

// Runs fn(0..n-1) on up to `threads` workers. The first exception thrown by
// any task is rethrown after all workers join.
void parallel_for(size_t n, unsigned threads, const std::function<void(size_t)>& fn);

struct RunManifest {
    std::string command;
    Json config = Json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> input_hashes;
    std::vector<std::string> outputs;
    double wall_seconds = 0.0;

    void hash_input(const std::string& label, const std::filesystem::path& path);
    Json to_json() const;
    void write(const std::filesystem::path& path) const;
};

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRunManifestName = "run_manifest.json";

}  // namespace dlens
