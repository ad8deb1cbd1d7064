#include "dlens/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include "dlens/error.hpp"
#include "json.hpp"

namespace dlens {

namespace {

void append_utf8(std::string& out, uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

struct CodePoint {
    uint32_t cp;
    size_t offset;
    size_t len;
};

// Tolerant decoder: invalid sequences become single-byte code points.
std::vector<CodePoint> decode_utf8(std::string_view s) {
    std::vector<CodePoint> out;
    size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        uint32_t cp = c;
        auto cont = [&](size_t k) {
            return i + k < s.size() && (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
        };
        if ((c & 0xE0) == 0xC0 && cont(1)) {
            len = 2;
            cp = ((c & 0x1Fu) << 6) | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
        } else if ((c & 0xF0) == 0xE0 && cont(1) && cont(2)) {
            len = 3;
            cp = ((c & 0x0Fu) << 12) | ((static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 6) |
                 (static_cast<unsigned char>(s[i + 2]) & 0x3Fu);
        } else if ((c & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
            len = 4;
            cp = ((c & 0x07u) << 18) | ((static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 12) |
                 ((static_cast<unsigned char>(s[i + 2]) & 0x3Fu) << 6) |
                 (static_cast<unsigned char>(s[i + 3]) & 0x3Fu);
        }
        out.push_back({cp, i, len});
        i += len;
    }
    return out;
}

bool is_space(uint32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20: case 0x85: case 0xA0:
        case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

bool is_number(uint32_t cp) {
    return (cp >= '0' && cp <= '9') || cp == 0xB2 || cp == 0xB3 || cp == 0xB9 || (cp >= 0xBC && cp <= 0xBE) ||
           (cp >= 0x660 && cp <= 0x669) || (cp >= 0xFF10 && cp <= 0xFF19);
}

// Approximation of \p{L}: ASCII letters, Latin-1 letters, and any other
// non-ASCII code point outside the common punctuation/symbol blocks.
bool is_letter(uint32_t cp) {
    if (cp < 0x80) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    if (cp < 0xC0) return cp == 0xAA || cp == 0xB5 || cp == 0xBA;
    if (cp < 0x250) return cp != 0xD7 && cp != 0xF7;
    if (is_space(cp) || is_number(cp)) return false;
    if (cp >= 0x2000 && cp <= 0x2BFF) return false;  // punctuation, symbols, arrows, shapes
    if (cp >= 0x3000 && cp <= 0x303F) return false;  // CJK punctuation
    if (cp >= 0xFE30 && cp <= 0xFE4F) return false;
    if (cp >= 0xFF00 && cp <= 0xFF20) return false;
    if (cp >= 0x1F000) return false;  // emoji and pictographs
    return true;
}

bool is_other(uint32_t cp) { return !is_space(cp) && !is_letter(cp) && !is_number(cp); }

std::vector<std::string> split_utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& c : decode_utf8(s)) out.emplace_back(s.substr(c.offset, c.len));
    return out;
}

const std::unordered_map<std::string, unsigned char>& byte_decoder() {
    static const auto table = [] {
        std::unordered_map<std::string, unsigned char> t;
        const auto& enc = byte_encoder();
        for (size_t b = 0; b < 256; ++b) t.emplace(enc[b], static_cast<unsigned char>(b));
        return t;
    }();
    return table;
}

}  // namespace

const std::array<std::string, 256>& byte_encoder() {
    static const auto table = [] {
        std::array<std::string, 256> t;
        std::array<bool, 256> printable{};
        for (int b = '!'; b <= '~'; ++b) printable[b] = true;
        for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
        for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
        uint32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            const uint32_t cp = printable[b] ? static_cast<uint32_t>(b) : next++;
            append_utf8(t[b], cp);
        }
        return t;
    }();
    return table;
}

std::string encode_bytes(std::string_view raw) {
    const auto& enc = byte_encoder();
    std::string out;
    for (char c : raw) out += enc[static_cast<unsigned char>(c)];
    return out;
}

std::vector<std::string> pretokenize(std::string_view text) {
    const auto cps = decode_utf8(text);
    std::vector<std::string> pieces;
    const size_t n = cps.size();
    auto emit = [&](size_t from, size_t to) {
        const size_t begin = cps[from].offset;
        const size_t end = to < n ? cps[to].offset : text.size();
        pieces.emplace_back(text.substr(begin, end - begin));
    };
    auto run = [&](size_t from, bool (*pred)(uint32_t)) {
        size_t j = from;
        while (j < n && pred(cps[j].cp)) ++j;
        return j;
    };

    size_t i = 0;
    while (i < n) {
        const uint32_t c = cps[i].cp;
        if (c == '\'' && i + 1 < n) {
            const uint32_t a = cps[i + 1].cp;
            const uint32_t b = i + 2 < n ? cps[i + 2].cp : 0;
            if (a == 's' || a == 't' || a == 'm' || a == 'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) {
                emit(i, i + 3);
                i += 3;
                continue;
            }
        }
        const bool lead_space = c == ' ' && i + 1 < n && !is_space(cps[i + 1].cp);
        const size_t start = lead_space ? i + 1 : i;
        const uint32_t head = cps[start].cp;
        if (is_letter(head)) {
            const size_t j = run(start, is_letter);
            emit(i, j);
            i = j;
        } else if (is_number(head)) {
            const size_t j = run(start, is_number);
            emit(i, j);
            i = j;
        } else if (!is_space(head)) {
            const size_t j = run(start, is_other);
            emit(i, j);
            i = j;
        } else {
            const size_t j = run(i, is_space);
            if (j == n || j - i == 1) {
                emit(i, j);
                i = j;
            } else {
                emit(i, j - 1);
                i = j - 1;
            }
        }
    }
    return pieces;
}

BpeVocab::BpeVocab(std::unordered_map<std::string, TokenId> token_to_id,
                   std::vector<std::pair<std::string, std::string>> merges)
    : token_to_id_(std::move(token_to_id)), merges_(std::move(merges)) {
    id_to_token_.assign(token_to_id_.size(), std::string());
    std::vector<bool> seen(token_to_id_.size(), false);
    for (const auto& [tok, id] : token_to_id_) {
        if (id < 0 || static_cast<size_t>(id) >= token_to_id_.size() || seen[static_cast<size_t>(id)]) {
            throw ValidationError("vocab ids must be dense and unique in [0, vocab_size); bad id " +
                                  std::to_string(id) + " for token '" + tok + "'");
        }
        seen[static_cast<size_t>(id)] = true;
        id_to_token_[static_cast<size_t>(id)] = tok;
    }
    for (const auto& sym : byte_encoder()) {
        if (!token_to_id_.count(sym)) throw ValidationError("vocab is missing byte symbol '" + sym + "'");
    }
    for (size_t r = 0; r < merges_.size(); ++r) merge_rank_.emplace(merges_[r], r);
}

BpeVocab BpeVocab::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    std::ifstream vin(vocab_json);
    if (!vin) throw ValidationError("cannot open " + vocab_json.string());
    nlohmann::json j;
    try {
        vin >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed vocab.json: " + std::string(e.what()));
    }
    std::unordered_map<std::string, TokenId> table;
    for (const auto& [tok, id] : j.items()) table.emplace(tok, id.get<TokenId>());

    std::ifstream min(merges_txt);
    if (!min) throw ValidationError("cannot open " + merges_txt.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    while (std::getline(min, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw ValidationError("malformed merges line: " + line);
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return BpeVocab(std::move(table), std::move(merges));
}

void BpeVocab::save(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (size_t id = 0; id < id_to_token_.size(); ++id) j[id_to_token_[id]] = id;
    std::ofstream vout(vocab_json);
    vout << j.dump();
    std::ofstream mout(merges_txt);
    mout << "#version: 0.2\n";
    for (const auto& [a, b] : merges_) mout << a << ' ' << b << '\n';
    if (!vout || !mout) throw std::runtime_error("failed writing tokenizer tables");
}

const std::string& BpeVocab::token(TokenId id) const {
    if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[static_cast<size_t>(id)];
}

TokenId BpeVocab::id(const std::string& symbol) const {
    auto it = token_to_id_.find(symbol);
    return it == token_to_id_.end() ? -1 : it->second;
}

std::vector<std::string> BpeVocab::bpe(const std::string& word) const {
    std::vector<std::string> parts = split_utf8_chars(word);
    while (parts.size() > 1) {
        size_t best_rank = std::numeric_limits<size_t>::max();
        size_t best_at = 0;
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            auto it = merge_rank_.find({parts[i], parts[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_at = i;
            }
        }
        if (best_rank == std::numeric_limits<size_t>::max()) break;
        const std::string first = parts[best_at];
        const std::string second = parts[best_at + 1];
        std::vector<std::string> merged;
        merged.reserve(parts.size());
        for (size_t i = 0; i < parts.size();) {
            if (i + 1 < parts.size() && parts[i] == first && parts[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(parts[i]);
                ++i;
            }
        }
        parts = std::move(merged);
    }
    return parts;
}

std::vector<TokenId> BpeVocab::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& piece : pretokenize(text)) {
        for (const auto& sym : bpe(encode_bytes(piece))) {
            const TokenId t = id(sym);
            if (t >= 0) {
                ids.push_back(t);
                continue;
            }
            for (const auto& ch : split_utf8_chars(sym)) ids.push_back(id(ch));
        }
    }
    return ids;
}

std::string BpeVocab::decode(const std::vector<TokenId>& ids) const {
    std::string symbols;
    for (TokenId t : ids) symbols += token(t);
    const auto& dec = byte_decoder();
    std::string out;
    for (const auto& ch : split_utf8_chars(symbols)) {
        auto it = dec.find(ch);
        if (it == dec.end()) throw ValidationError("token symbol '" + ch + "' is not byte-encoded");
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

std::string BpeVocab::token_text(TokenId id) const { return decode({id}); }

TokenId BpeVocab::single_token(std::string_view text) const {
    const auto ids = encode(text);
    return ids.size() == 1 ? ids.front() : -1;
}

}  // namespace dlens
