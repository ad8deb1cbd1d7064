#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dlens {

using TokenId = int;

// GPT-2 byte-level BPE tables. Immutable after construction.
class BpeVocab {
public:
    BpeVocab(std::unordered_map<std::string, TokenId> token_to_id,
             std::vector<std::pair<std::string, std::string>> merges);

    static BpeVocab load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
    void save(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) const;

    size_t size() const { return id_to_token_.size(); }
    const std::string& token(TokenId id) const;
    // Returns -1 when the symbol is not in the vocabulary.
    TokenId id(const std::string& symbol) const;
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;
    // Decoded text of a single token.
    std::string token_text(TokenId id) const;
    // Id of `text` if it encodes to exactly one token, else -1.
    TokenId single_token(std::string_view text) const;

private:
    std::vector<std::string> bpe(const std::string& word) const;

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, size_t> merge_rank_;
};

// Byte -> printable unicode symbol (UTF-8) table used by GPT-2.
const std::array<std::string, 256>& byte_encoder();
// GPT-2 pre-tokenizer split ('s|'t|...| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+).
std::vector<std::string> pretokenize(std::string_view text);
// Maps raw bytes to their byte-encoder symbols.
std::string encode_bytes(std::string_view raw);

}  // namespace dlens
