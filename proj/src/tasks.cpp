#include "dlens/tasks.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "dlens/error.hpp"

namespace dlens {

std::string task_name(Task t) {
    switch (t) {
        case Task::IOI: return "ioi";
        case Task::GT: return "gt";
        case Task::GP: return "gp";
    }
    return "?";
}

Task parse_task(const std::string& s) {
    if (s == "ioi") return Task::IOI;
    if (s == "gt") return Task::GT;
    if (s == "gp") return Task::GP;
    throw ValidationError("unknown task '" + s + "' (expected ioi, gt, gp)");
}

SplitSpec SplitSpec::defaults(Task t) {
    switch (t) {
        case Task::IOI: return {1000, 200, 1000};
        case Task::GT: return {2000, 500, 2000};
        case Task::GP: return {1000, 155, 307};
    }
    return {};
}

SplitSpec SplitSpec::scaled_down(size_t factor) const {
    if (factor == 0) throw ValidationError("split scale factor must be positive");
    auto div = [&](size_t n) { return (n + factor - 1) / factor; };
    return {div(train), div(val), div(test)};
}

const std::vector<std::string>& male_names() {
    static const std::vector<std::string> names = {
        "John",   "James",  "David",  "Michael", "Robert", "William", "Richard", "Thomas", "Charles", "Daniel",
        "Paul",   "Mark",   "George", "Steven",  "Andrew", "Peter",   "Kevin",   "Brian",  "Jason",   "Ryan",
        "Eric",   "Adam",   "Jack",   "Tom",     "Mike",   "Bob",     "Joe",     "Sam",    "Ben",     "Matt",
        "Chris",  "Henry",  "Edward", "Frank",   "Scott",  "Jeff",    "Greg",    "Tim",    "Martin",  "Dan"};
    return names;
}

const std::vector<std::string>& female_names() {
    static const std::vector<std::string> names = {
        "Mary",   "Sarah",  "Jessica", "Jennifer", "Elizabeth", "Emily", "Anna",   "Rachel", "Laura",   "Susan",
        "Karen",  "Lisa",   "Nancy",   "Linda",    "Amy",       "Emma",  "Kate",   "Julia",  "Alice",   "Rose",
        "Helen",  "Grace",  "Anne",    "Jane",     "Lucy",      "Claire", "Ruth",  "Diana",  "Kelly",   "Megan",
        "Rebecca", "Maria", "Michelle", "Amanda",  "Nicole",    "Heather", "Melissa", "Catherine", "Sophie", "Victoria"};
    return names;
}

const std::vector<std::string>& gt_nouns() {
    static const std::vector<std::string> nouns = {
        "abduction",   "accord",        "affair",       "agreement",   "appraisal",     "assault",
        "assessment",  "attack",        "attempt",      "campaign",    "captivity",     "case",
        "challenge",   "chaos",         "clash",        "collaboration", "coma",        "competition",
        "confrontation", "consequence", "conspiracy",   "construction", "consultation", "contact",
        "contract",    "convention",    "cooperation",  "custody",     "deal",          "decline",
        "decrease",    "demonstration", "development",  "disagreement", "disorder",     "dispute",
        "domination",  "dynasty",       "effect",       "effort",      "employment",    "endeavor",
        "engagement",  "epidemic",      "evaluation",   "exchange",    "existence",     "expansion",
        "expedition",  "experiment",    "fall",         "flame",       "flight",        "friendship",
        "growth",      "hardship",      "hostility",    "illness",     "impact",        "imprisonment",
        "improvement", "incarceration", "increase",     "insurgency",  "invasion",      "investigation",
        "journey",     "kingdom",       "marriage",     "modernization", "negotiation", "notoriety",
        "obstruction", "operation",     "order",        "outbreak",    "outcome",       "overhaul",
        "patrol",      "pilgrimage",    "plague",       "plan",        "practice",      "process",
        "program",     "progress",      "project",      "pursuit",     "quest",         "raid",
        "reform",      "reign",         "relationship", "retaliation", "riot",          "rise",
        "rivalry",     "romance",       "rule",         "sanction",    "shift",         "siege",
        "slump",       "stature",       "stint",        "strike",      "study",         "test",
        "therapy",     "tour",          "tradition",    "treaty",      "trial",         "trip",
        "unemployment", "voyage",       "warfare",      "work",        "war",           "truce"};
    return nouns;
}

namespace {

struct IoiTemplate {
    const char* intro;   // with {A}, {B}, {PLACE}, {OBJECT}
    const char* action;  // with {S}, {OBJECT}
};

const std::vector<IoiTemplate>& ioi_templates() {
    static const std::vector<IoiTemplate> t = {
        {"When {A} and {B} went to the {PLACE},", " {S} gave a {OBJECT} to"},
        {"After {A} and {B} went to the {PLACE},", " {S} gave a {OBJECT} to"},
        {"While {A} and {B} were working at the {PLACE},", " {S} gave a {OBJECT} to"},
        {"Then, {A} and {B} had a lot of fun at the {PLACE}.", " {S} gave a {OBJECT} to"},
        {"Friends {A} and {B} found a {OBJECT} at the {PLACE}.", " {S} gave it to"},
        {"When {A} and {B} got a {OBJECT} at the {PLACE},", " {S} decided to give it to"},
        {"The {PLACE} was busy when {A} and {B} arrived.", " {S} handed a {OBJECT} to"},
        {"When {A} and {B} met at the {PLACE},", " {S} passed the {OBJECT} to"},
    };
    return t;
}

const std::vector<std::string>& places() {
    static const std::vector<std::string> p = {"store", "garden", "restaurant", "school", "hospital",
                                               "office", "house", "station", "park", "market"};
    return p;
}

const std::vector<std::string>& objects() {
    static const std::vector<std::string> o = {"drink", "ring", "kiss", "bone", "book",
                                               "computer", "necklace", "snack", "letter", "ball"};
    return o;
}

const char* kGpTemplate = "So {NAME} is a {ADV} {ADJ} {ROLE}, isn't";

const std::vector<std::string>& gp_adverbs() {
    static const std::vector<std::string> a = {"really", "very", "truly", "pretty"};
    return a;
}

const std::vector<std::string>& gp_adjectives() {
    static const std::vector<std::string> a = {"great", "good", "nice", "kind", "smart", "funny", "strong", "talented"};
    return a;
}

const std::vector<std::string>& gp_roles() {
    static const std::vector<std::string> r = {"friend", "athlete", "teacher", "doctor", "student", "person",
                                               "neighbor", "cook", "writer", "singer", "dancer", "player",
                                               "worker", "artist", "driver", "leader"};
    return r;
}

const char* kGtTemplate = "The {NOUN} lasted from the year {YEAR} to the year {XX}";

std::string fill(std::string s, const std::vector<std::pair<std::string, std::string>>& subs) {
    for (const auto& [key, val] : subs) {
        for (size_t pos; (pos = s.find(key)) != std::string::npos;) s.replace(pos, key.size(), val);
    }
    return s;
}

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
    return v[rng() % v.size()];
}

std::string two_digits(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

// Names that encode to one token with a leading space.
std::vector<std::string> single_token_names(const std::vector<std::string>& names, const BpeVocab& vocab) {
    std::vector<std::string> out;
    for (const auto& n : names)
        if (vocab.single_token(" " + n) >= 0) out.push_back(n);
    return out;
}

size_t attempt_cap(size_t n) { return 200 * n + 20000; }

[[noreturn]] void exhausted(Task t, size_t got, size_t want) {
    throw ValidationError("could only generate " + std::to_string(got) + " of " + std::to_string(want) +
                          " unique " + task_name(t) + " prompts");
}

TokenId require_single(const BpeVocab& vocab, const std::string& text) {
    const TokenId id = vocab.single_token(text);
    if (id < 0) throw ValidationError("'" + text + "' is not a single token in this vocabulary");
    return id;
}

}  // namespace

std::vector<std::string> template_pieces() {
    std::set<std::string> pieces;
    auto add_text = [&](const std::string& text) {
        for (auto& p : pretokenize(text)) pieces.insert(p);
    };
    for (const auto& t : ioi_templates()) {
        add_text(fill(std::string(t.intro) + t.action,
                      {{"{A}", "Mary"}, {"{B}", "John"}, {"{S}", "John"}, {"{PLACE}", "store"}, {"{OBJECT}", "drink"}}));
    }
    add_text(fill(kGpTemplate, {{"{NAME}", "Mary"}, {"{ADV}", "very"}, {"{ADJ}", "good"}, {"{ROLE}", "athlete"}}));
    add_text(fill(kGtTemplate, {{"{NOUN}", "treaty"}, {"{YEAR}", "1314"}, {"{XX}", "13"}}));
    for (const auto* list : {&male_names(), &female_names(), &gt_nouns(), &places(), &objects(), &gp_adverbs(),
                             &gp_adjectives(), &gp_roles()})
        for (const auto& w : *list) pieces.insert(" " + w);
    for (const char* w : {" he", " she", " He", " She", " his", " her"}) pieces.insert(w);
    for (int xx = 10; xx <= 19; ++xx) pieces.insert(" " + std::to_string(xx));
    for (int v = 0; v <= 99; ++v) pieces.insert(two_digits(v));
    return {pieces.begin(), pieces.end()};
}

std::vector<PromptPair> gen_ioi(size_t n, std::uint64_t seed, const BpeVocab& vocab) {
    if (n == 0) throw ValidationError("gen_ioi: n must be positive");
    std::vector<std::string> pool = single_token_names(male_names(), vocab);
    for (auto& f : single_token_names(female_names(), vocab)) pool.push_back(f);
    if (pool.size() < 3) throw ValidationError("gen_ioi: name pool exhausted (need 3 single-token names)");
    std::mt19937_64 rng(seed);
    std::set<std::string> seen;
    std::vector<PromptPair> out;
    for (size_t attempt = 0; out.size() < n; ++attempt) {
        if (attempt >= attempt_cap(n)) exhausted(Task::IOI, out.size(), n);
        const size_t ti = rng() % ioi_templates().size();
        const auto& t = ioi_templates()[ti];
        const std::string& io = pick(rng, pool);
        const std::string& s = pick(rng, pool);
        const std::string& c = pick(rng, pool);
        if (io == s || c == io || c == s) continue;
        const bool abba = rng() % 2 == 0;
        const std::string& a = abba ? io : s;
        const std::string& b = abba ? s : io;
        const std::string& place = pick(rng, places());
        const std::string& object = pick(rng, objects());
        const std::vector<std::pair<std::string, std::string>> common = {
            {"{A}", a}, {"{B}", b}, {"{PLACE}", place}, {"{OBJECT}", object}};
        const std::string intro = fill(t.intro, common);
        PromptPair p;
        p.task = Task::IOI;
        p.clean_text = intro + fill(fill(t.action, common), {{"{S}", s}});
        if (seen.count(p.clean_text)) continue;
        p.corrupt_text = intro + fill(fill(t.action, common), {{"{S}", c}});
        p.clean_tokens = vocab.encode(p.clean_text);
        p.corrupt_tokens = vocab.encode(p.corrupt_text);
        if (p.clean_tokens.size() != p.corrupt_tokens.size()) continue;
        p.answer_token = require_single(vocab, " " + io);
        p.foil_token = require_single(vocab, " " + s);
        p.metadata = {{"io", io}, {"subject", s}, {"corrupt_name", c}, {"template", ti}};
        seen.insert(p.clean_text);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<PromptPair> gen_gt(size_t n, std::uint64_t seed, const BpeVocab& vocab) {
    if (n == 0) throw ValidationError("gen_gt: n must be positive");
    std::mt19937_64 rng(seed);
    std::set<std::string> seen;
    std::vector<PromptPair> out;
    for (size_t attempt = 0; out.size() < n; ++attempt) {
        if (attempt >= attempt_cap(n)) exhausted(Task::GT, out.size(), n);
        const int xx = 11 + static_cast<int>(rng() % 7);
        const int yy = 2 + static_cast<int>(rng() % 97);
        const std::string& noun = pick(rng, gt_nouns());
        const std::string xs = std::to_string(xx);
        const TokenId century = vocab.single_token(" " + xs);
        const TokenId start = vocab.single_token(two_digits(yy));
        const TokenId start_c = vocab.single_token("01");
        if (century < 0 || start < 0 || start_c < 0) continue;
        // The year must split as " XX" + "YY" so the prompt ends on the century token.
        if (vocab.encode(" " + xs + two_digits(yy)) != std::vector<TokenId>{century, start}) continue;
        if (vocab.encode(" " + xs + "01") != std::vector<TokenId>{century, start_c}) continue;
        PromptPair p;
        p.task = Task::GT;
        p.clean_text = fill(kGtTemplate, {{"{NOUN}", noun}, {"{YEAR}", xs + two_digits(yy)}, {"{XX}", xs}});
        if (seen.count(p.clean_text)) continue;
        p.corrupt_text = fill(kGtTemplate, {{"{NOUN}", noun}, {"{YEAR}", xs + "01"}, {"{XX}", xs}});
        p.clean_tokens = vocab.encode(p.clean_text);
        p.corrupt_tokens = vocab.encode(p.corrupt_text);
        if (p.clean_tokens.size() != p.corrupt_tokens.size()) continue;
        Json valid = Json::array();
        for (int v = yy + 1; v <= 99; ++v) {
            const TokenId id = vocab.single_token(two_digits(v));
            if (id >= 0) valid.push_back(id);
        }
        if (valid.empty()) continue;
        p.answer_token = valid.front().get<TokenId>();
        p.metadata = {{"noun", noun}, {"year", xx * 100 + yy}, {"valid_answers", valid}};
        seen.insert(p.clean_text);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<PromptPair> gen_gp(size_t n, std::uint64_t seed, const BpeVocab& vocab) {
    if (n == 0) throw ValidationError("gen_gp: n must be positive");
    const auto male = single_token_names(male_names(), vocab);
    const auto female = single_token_names(female_names(), vocab);
    if (male.empty() || female.empty()) throw ValidationError("gen_gp: no length-matched opposite-gender name");
    const TokenId he = require_single(vocab, " he");
    const TokenId she = require_single(vocab, " she");
    std::mt19937_64 rng(seed);
    std::set<std::string> seen;
    std::vector<PromptPair> out;
    for (size_t attempt = 0; out.size() < n; ++attempt) {
        if (attempt >= attempt_cap(n)) exhausted(Task::GP, out.size(), n);
        const bool is_he = out.size() % 2 == 0;
        const std::string& name = pick(rng, is_he ? male : female);
        const std::string& other = pick(rng, is_he ? female : male);
        const std::vector<std::pair<std::string, std::string>> common = {
            {"{ADV}", pick(rng, gp_adverbs())}, {"{ADJ}", pick(rng, gp_adjectives())}, {"{ROLE}", pick(rng, gp_roles())}};
        PromptPair p;
        p.task = Task::GP;
        p.clean_text = fill(fill(kGpTemplate, {{"{NAME}", name}}), common);
        if (seen.count(p.clean_text)) continue;
        p.corrupt_text = fill(fill(kGpTemplate, {{"{NAME}", other}}), common);
        p.clean_tokens = vocab.encode(p.clean_text);
        p.corrupt_tokens = vocab.encode(p.corrupt_text);
        if (p.clean_tokens.size() != p.corrupt_tokens.size()) continue;
        p.answer_token = is_he ? he : she;
        p.foil_token = is_he ? she : he;
        p.metadata = {{"name", name}, {"corrupt_name", other}, {"gender", is_he ? "he" : "she"}};
        seen.insert(p.clean_text);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<PromptPair> generate(Task task, size_t n, std::uint64_t seed, const BpeVocab& vocab) {
    switch (task) {
        case Task::IOI: return gen_ioi(n, seed, vocab);
        case Task::GT: return gen_gt(n, seed, vocab);
        case Task::GP: return gen_gp(n, seed, vocab);
    }
    return {};
}

Corpus make_corpus(Task task, const SplitSpec& split, std::uint64_t seed, const BpeVocab& vocab) {
    auto all = generate(task, split.total(), seed, vocab);
    Corpus c;
    c.task = task;
    auto it = all.begin();
    auto take = [&](size_t k, std::vector<PromptPair>& dst) {
        dst.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(k)));
        it += static_cast<std::ptrdiff_t>(k);
    };
    take(split.train, c.train);
    take(split.val, c.val);
    take(split.test, c.test);
    return c;
}

TaskRecord task_metric(const Tensor& logits, const PromptPair& pair) {
    const auto row = logits.row(logits.rows() - 1);
    const auto argmax = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    TaskRecord r;
    if (pair.task == Task::GT) {
        bool hit = false;
        for (const auto& v : pair.metadata.at("valid_answers"))
            if (v.get<TokenId>() == argmax) hit = true;
        r.exact_match = hit ? 1.0 : 0.0;
        return r;
    }
    r.exact_match = argmax == pair.answer_token ? 1.0 : 0.0;
    if (pair.foil_token) r.accuracy = row[pair.answer_token] > row[*pair.foil_token] ? 1.0 : 0.0;
    return r;
}

Json pair_to_json(const PromptPair& p) {
    Json j;
    j["task"] = task_name(p.task);
    j["clean_text"] = p.clean_text;
    j["corrupt_text"] = p.corrupt_text;
    j["clean_tokens"] = p.clean_tokens;
    j["corrupt_tokens"] = p.corrupt_tokens;
    j["answer_token"] = p.answer_token;
    j["foil_token"] = p.foil_token ? Json(*p.foil_token) : Json(nullptr);
    j["metadata"] = p.metadata;
    return j;
}

PromptPair pair_from_json(const Json& j) {
    PromptPair p;
    try {
        p.task = parse_task(j.at("task").get<std::string>());
        p.clean_text = j.at("clean_text").get<std::string>();
        p.corrupt_text = j.at("corrupt_text").get<std::string>();
        p.clean_tokens = j.at("clean_tokens").get<std::vector<TokenId>>();
        p.corrupt_tokens = j.at("corrupt_tokens").get<std::vector<TokenId>>();
        p.answer_token = j.at("answer_token").get<TokenId>();
        if (j.contains("foil_token") && !j["foil_token"].is_null()) p.foil_token = j["foil_token"].get<TokenId>();
        if (j.contains("metadata")) p.metadata = j["metadata"];
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed prompt record: ") + e.what());
    }
    if (p.clean_tokens.size() != p.corrupt_tokens.size()) {
        throw ValidationError("prompt record has unequal clean/corrupt token lengths: " + p.clean_text);
    }
    return p;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PromptPair>& pairs) {
    std::string text;
    for (const auto& p : pairs) text += pair_to_json(p).dump() + "\n";
    write_text(path, text);
}

std::vector<PromptPair> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::vector<PromptPair> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(pair_from_json(Json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& c) {
    write_jsonl(dir / "train.jsonl", c.train);
    write_jsonl(dir / "val.jsonl", c.val);
    write_jsonl(dir / "test.jsonl", c.test);
}

Corpus read_corpus(const std::filesystem::path& dir) {
    Corpus c;
    c.train = read_jsonl(dir / "train.jsonl");
    c.val = read_jsonl(dir / "val.jsonl");
    c.test = read_jsonl(dir / "test.jsonl");
    const auto& any = !c.train.empty() ? c.train : !c.val.empty() ? c.val : c.test;
    if (!any.empty()) c.task = any.front().task;
    return c;
}

}  // namespace dlens
