#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dlens/tensor.hpp"
#include "dlens/tokenizer.hpp"
#include "dlens/util.hpp"

namespace dlens {

enum class Task { IOI, GT, GP };

std::string task_name(Task t);  // "ioi", "gt", "gp"
Task parse_task(const std::string& s);

struct PromptPair {
    Task task = Task::IOI;
    std::string clean_text, corrupt_text;
    std::vector<TokenId> clean_tokens, corrupt_tokens;
    TokenId answer_token = -1;
    std::optional<TokenId> foil_token;
    // IOI: io, subject, corrupt_name, template. GT: noun, year, valid_answers.
    // GP: name, corrupt_name, gender.
    Json metadata = Json::object();
};

struct SplitSpec {
    size_t train = 0, val = 0, test = 0;
    size_t total() const { return train + val + test; }
    static SplitSpec defaults(Task t);
    // Each split divided by `factor`, rounded up.
    SplitSpec scaled_down(size_t factor) const;
};

struct Corpus {
    Task task = Task::IOI;
    std::vector<PromptPair> train, val, test;
};

// Word pools. Names are returned without the leading space.
const std::vector<std::string>& male_names();
const std::vector<std::string>& female_names();
const std::vector<std::string>& gt_nouns();
// Every word the generators can emit, as pretokenizer pieces (with leading
// space where the templates put one). Used to build toy vocabularies.
std::vector<std::string> template_pieces();

// Throw ValidationError when the vocabulary cannot support the task (e.g.
// too few single-token names). Clean texts within one call are unique.
std::vector<PromptPair> gen_ioi(size_t n, std::uint64_t seed, const BpeVocab& vocab);
std::vector<PromptPair> gen_gt(size_t n, std::uint64_t seed, const BpeVocab& vocab);
std::vector<PromptPair> gen_gp(size_t n, std::uint64_t seed, const BpeVocab& vocab);
std::vector<PromptPair> generate(Task task, size_t n, std::uint64_t seed, const BpeVocab& vocab);

// Generates split.total() unique prompts and partitions them in order.
Corpus make_corpus(Task task, const SplitSpec& split, std::uint64_t seed, const BpeVocab& vocab);

struct TaskRecord {
    std::optional<double> accuracy;  // GT: not applicable
    double exact_match = 0.0;
};

TaskRecord task_metric(const Tensor& logits, const PromptPair& pair);

Json pair_to_json(const PromptPair& p);
PromptPair pair_from_json(const Json& j);
void write_jsonl(const std::filesystem::path& path, const std::vector<PromptPair>& pairs);
std::vector<PromptPair> read_jsonl(const std::filesystem::path& path);
// <dir>/{train,val,test}.jsonl
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace dlens
