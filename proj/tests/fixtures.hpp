#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "dlens/decomposition.hpp"
#include "dlens/model.hpp"
#include "dlens/toy.hpp"

namespace fixture {

inline const dlens::BpeVocab& vocab() {
    static const dlens::BpeVocab v = dlens::make_toy_vocab();
    return v;
}

// Random toy model with a small vocabulary (fast oracles).
inline dlens::Weights small_model(std::uint64_t seed = 7, size_t vocab_size = 40) {
    return dlens::make_random_model(dlens::toy_config(vocab_size), seed);
}

inline std::vector<int> random_tokens(size_t n, size_t vocab_size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng() % vocab_size);
    return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dlens_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace fixture
