#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "dlens/decomposition.hpp"
#include "dlens/model.hpp"
#include "dlens/tokenizer.hpp"

namespace dlens {

// Byte-level BPE vocabulary in which every word the task generators emit is
// a single token, and " XXYY" years split as " XX" + "YY".
BpeVocab make_toy_vocab();

// 2 layers, d_model 16, 2 heads of 8, d_mlp 32, 64 positions.
ModelConfig toy_config(size_t vocab_size);

// Gaussian weights (std `scale`), layer-norm gains near 1. Deterministic in `seed`.
Weights make_random_model(const ModelConfig& config, std::uint64_t seed, float scale = 0.3f);

// One layer, one head, one-hot embeddings. Attention is uniform (QK = 0)
// and the OV circuit is a sum of planted rank-1 maps: a signal direction that
// reads e_A - e_B and writes to the A/B logits, and distractors that move
// filler-token information between filler logits. MLP weights are zero.
struct PlantedModel {
    Weights weights;
    TokenId tok_a = 0, tok_b = 1, tok_query = 6;
    std::vector<TokenId> fillers;
    std::vector<std::vector<float>> read_dirs;  // unit vectors in d_model space, signal first
    std::vector<double> strengths;               // planted singular values, same order
};

PlantedModel make_planted_model(std::uint64_t seed);

// (clean, corrupt) prompts: random fillers, one A (clean) or B (corrupt) at
// the same random position, final query token.
std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> planted_pairs(const PlantedModel& m, size_t n,
                                                                                 std::uint64_t seed);

// Index of the direction of `ov` whose input vector best matches `read`.
size_t match_direction(const SVDFactors& ov, const std::vector<float>& read);

}  // namespace dlens
