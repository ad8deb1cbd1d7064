#include "dlens/toy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "dlens/error.hpp"
#include "dlens/tasks.hpp"

namespace dlens {

namespace {

std::vector<std::string> symbols_of(const std::string& piece) {
    std::vector<std::string> out;
    for (unsigned char b : piece) out.push_back(byte_encoder()[b]);
    return out;
}

void apply_merge(std::vector<std::string>& word, const std::string& a, const std::string& b) {
    std::vector<std::string> out;
    for (size_t i = 0; i < word.size(); ++i) {
        if (i + 1 < word.size() && word[i] == a && word[i + 1] == b) {
            out.push_back(a + b);
            ++i;
        } else {
            out.push_back(word[i]);
        }
    }
    word = std::move(out);
}

}  // namespace

BpeVocab make_toy_vocab() {
    std::vector<std::pair<std::string, std::string>> merges;
    std::vector<std::string> tokens;
    for (const auto& s : byte_encoder()) tokens.push_back(s);
    const std::string space = byte_encoder()[' '];

    // Numbers first: " 10".." 19" and "00".."99".
    merges.emplace_back(space, "1");
    for (char d = '0'; d <= '9'; ++d) merges.emplace_back(space + "1", std::string(1, d));
    for (char a = '0'; a <= '9'; ++a)
        for (char b = '0'; b <= '9'; ++b) merges.emplace_back(std::string(1, a), std::string(1, b));

    std::vector<std::vector<std::string>> words;
    for (const auto& p : template_pieces()) {
        if (std::any_of(p.begin(), p.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
        words.push_back(symbols_of(p));
    }
    for (;;) {
        std::map<std::pair<std::string, std::string>, size_t> counts;
        for (const auto& w : words)
            for (size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
        if (counts.empty()) break;
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it)
            if (it->second > best->second) best = it;  // ties: first in lexicographic order
        merges.push_back(best->first);
        for (auto& w : words) apply_merge(w, best->first.first, best->first.second);
    }

    std::set<std::string> seen(tokens.begin(), tokens.end());
    for (const auto& [a, b] : merges)
        if (seen.insert(a + b).second) tokens.push_back(a + b);
    std::unordered_map<std::string, TokenId> ids;
    for (size_t i = 0; i < tokens.size(); ++i) ids[tokens[i]] = static_cast<TokenId>(i);
    BpeVocab vocab(std::move(ids), std::move(merges));
    for (const auto& p : template_pieces())
        if (std::none_of(p.begin(), p.end(), [](char c) { return c >= '0' && c <= '9'; }) && vocab.single_token(p) < 0)
            throw std::logic_error("toy vocab: piece '" + p + "' is not a single token");
    return vocab;
}

ModelConfig toy_config(size_t vocab_size) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_head = 8;
    c.d_mlp = 32;
    c.vocab_size = vocab_size;
    c.max_positions = 64;
    return c;
}

Weights make_random_model(const ModelConfig& c, std::uint64_t seed, float scale) {
    c.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    auto rand = [&](std::vector<size_t> shape, float s) {
        Tensor t(std::move(shape));
        for (float& v : t.storage()) v = s * normal(rng);
        return t;
    };
    auto gain = [&](size_t n) {
        Tensor t = Tensor::vector(n);
        for (float& v : t.storage()) v = 1.0f + 0.1f * normal(rng);
        return t;
    };
    const size_t d = c.d_model, dh = c.d_head;
    Weights w;
    w.config = c;
    w.token_embedding = rand({c.vocab_size, d}, 1.0f);
    w.position_embedding = rand({c.max_positions, d}, 0.5f);
    for (size_t l = 0; l < c.n_layers; ++l) {
        LayerWeights L;
        L.ln1_gamma = gain(d);
        L.ln1_beta = rand({d}, 0.1f);
        for (size_t h = 0; h < c.n_heads; ++h) {
            L.w_q.push_back(rand({d, dh}, scale));
            L.w_k.push_back(rand({d, dh}, scale));
            L.w_v.push_back(rand({d, dh}, scale));
            L.b_q.push_back(rand({dh}, 0.1f));
            L.b_k.push_back(rand({dh}, 0.1f));
            L.b_v.push_back(rand({dh}, 0.1f));
            L.w_o.push_back(rand({dh, d}, scale));
        }
        L.b_o = rand({d}, 0.1f);
        L.ln2_gamma = gain(d);
        L.ln2_beta = rand({d}, 0.1f);
        L.w_in = rand({d, c.d_mlp}, scale);
        L.b_in = rand({c.d_mlp}, 0.1f);
        L.w_out = rand({c.d_mlp, d}, scale);
        L.b_out = rand({d}, 0.1f);
        w.layers.push_back(std::move(L));
    }
    w.lnf_gamma = gain(d);
    w.lnf_beta = rand({d}, 0.1f);
    w.w_u = transpose(w.token_embedding);
    w.b_u = Tensor::vector(c.vocab_size);
    return w;
}

PlantedModel make_planted_model(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(0.0, 1.0);
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 1;
    c.d_model = 8;
    c.d_head = 8;
    c.d_mlp = 4;
    c.vocab_size = 8;
    c.max_positions = 16;
    const size_t d = c.d_model;

    PlantedModel m;
    m.fillers = {2, 3, 4, 5, 7};
    Weights& w = m.weights;
    w.config = c;
    w.token_embedding = Tensor::identity(d);
    w.position_embedding = Tensor::matrix(c.max_positions, d);
    LayerWeights L;
    L.ln1_gamma = Tensor::vector(d, 1.0f);
    L.ln1_beta = Tensor::vector(d);
    L.w_q.push_back(Tensor::matrix(d, d));
    L.w_k.push_back(Tensor::matrix(d, d));
    L.b_q.push_back(Tensor::vector(d));
    L.b_k.push_back(Tensor::vector(d));
    L.b_v.push_back(Tensor::vector(d));
    L.b_o = Tensor::vector(d);

    auto pair_dir = [&](size_t i, size_t j) {
        std::vector<float> v(d, 0.0f);
        v[i] = static_cast<float>(1.0 / std::sqrt(2.0));
        v[j] = -v[i];
        return v;
    };
    // (read, write, strength): signal A-B -> A-B, distractors F0-F1 -> F2-F3 and F2-F3 -> F0-F1.
    const std::vector<std::pair<size_t, size_t>> reads{{0, 1}, {2, 3}, {4, 5}};
    const std::vector<std::pair<size_t, size_t>> writes{{0, 1}, {4, 5}, {2, 3}};
    m.strengths = {6.0 + 2.0 * jitter(rng), 3.5 + 1.0 * jitter(rng), 1.5 + 1.0 * jitter(rng)};
    Tensor wv = Tensor::matrix(d, d), wo = Tensor::matrix(d, d);
    for (size_t k = 0; k < reads.size(); ++k) {
        const auto a = pair_dir(reads[k].first, reads[k].second);
        const auto b = pair_dir(writes[k].first, writes[k].second);
        for (size_t i = 0; i < d; ++i) {
            wv(i, k) = a[i];
            wo(k, i) = static_cast<float>(m.strengths[k]) * b[i];
        }
        m.read_dirs.push_back(a);
    }
    L.w_v.push_back(wv);
    L.w_o.push_back(wo);
    L.ln2_gamma = Tensor::vector(d, 1.0f);
    L.ln2_beta = Tensor::vector(d);
    L.w_in = Tensor::matrix(d, c.d_mlp);
    L.b_in = Tensor::vector(c.d_mlp);
    L.w_out = Tensor::matrix(c.d_mlp, d);
    L.b_out = Tensor::vector(d);
    w.layers.push_back(std::move(L));
    w.lnf_gamma = Tensor::vector(d, 3.0f);
    w.lnf_beta = Tensor::vector(d);
    w.w_u = Tensor::identity(d);
    w.b_u = Tensor::vector(d);
    return m;
}

std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> planted_pairs(const PlantedModel& m, size_t n,
                                                                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> out;
    for (size_t i = 0; i < n; ++i) {
        const size_t T = 5 + rng() % 4;
        std::vector<TokenId> clean(T);
        for (size_t t = 0; t + 1 < T; ++t) clean[t] = m.fillers[rng() % m.fillers.size()];
        clean[T - 1] = m.tok_query;
        const size_t pos = rng() % (T - 1);
        std::vector<TokenId> corrupt = clean;
        clean[pos] = m.tok_a;
        corrupt[pos] = m.tok_b;
        out.emplace_back(std::move(clean), std::move(corrupt));
    }
    return out;
}

size_t match_direction(const SVDFactors& ov, const std::vector<float>& read) {
    if (ov.in_dim() != read.size() + 1) throw std::invalid_argument("match_direction: dimension mismatch");
    size_t best = 0;
    double best_v = -1.0;
    for (size_t k = 0; k < ov.rank(); ++k) {
        double s = 0.0;
        for (size_t i = 0; i < read.size(); ++i) s += ov.u(i + 1, k) * read[i];
        if (std::fabs(s) > best_v) {
            best_v = std::fabs(s);
            best = k;
        }
    }
    return best;
}

}  // namespace dlens
