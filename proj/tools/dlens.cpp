// dlens: decompose, train direction masks, intervene, analyze, report.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dlens/analysis.hpp"
#include "dlens/decomposition.hpp"
#include "dlens/error.hpp"
#include "dlens/intervention.hpp"
#include "dlens/masks.hpp"
#include "dlens/model_dir.hpp"
#include "dlens/report.hpp"
#include "dlens/tasks.hpp"
#include "dlens/toy.hpp"
#include "dlens/training.hpp"

namespace fs = std::filesystem;
using namespace dlens;

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<ComponentKind> parse_kinds(const std::string& s) {
    if (s == "all") return {ComponentKind::QK, ComponentKind::OV, ComponentKind::MLP_IN, ComponentKind::MLP_OUT};
    std::vector<ComponentKind> kinds;
    for (const auto& k : split_list(s)) {
        try {
            kinds.push_back(parse_kind(k));
        } catch (const std::exception&) {
            throw ValidationError("unknown component kind '" + k + "' (expected qk, ov, mlp_in, mlp_out or all)");
        }
    }
    if (kinds.empty()) throw ValidationError("--kinds is empty");
    return kinds;
}

Json kinds_json(const std::vector<ComponentKind>& kinds) {
    Json j = Json::array();
    for (auto k : kinds) j.push_back(kind_name(k));
    return j;
}

fs::path default_svd_dir(const fs::path& model_dir) {
    const char* root = std::getenv("DLENS_CACHE_DIR");
    if (!root || !*root) throw ValidationError("no SVD cache directory given and DLENS_CACHE_DIR is not set");
    return fs::path(root) / "svd" / hex64(fnv1a_file(model_dir / "model.safetensors"));
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

SvdCache load_svd_for(const fs::path& dir) {
    SvdCache svd = load_svd_cache(dir);
    if (svd.empty()) throw ValidationError("no SVD factors in " + dir.string() + "; run `dlens decompose` first");
    return svd;
}

// Corpus from a directory of {train,val,test}.jsonl or a single .jsonl file (loaded as test).
Corpus load_prompts(const fs::path& p) {
    if (fs::is_directory(p)) return read_corpus(p);
    if (!fs::exists(p)) throw ValidationError("data path not found: " + p.string());
    Corpus c;
    c.test = read_jsonl(p);
    if (!c.test.empty()) c.task = c.test.front().task;
    return c;
}

std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> token_pairs(const std::vector<PromptPair>& ps) {
    std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> out;
    for (const auto& p : ps) out.emplace_back(p.clean_tokens, p.corrupt_tokens);
    return out;
}

void check_tokens(const std::vector<PromptPair>& ps, const ModelConfig& c) {
    for (const auto& p : ps) {
        for (const auto* toks : {&p.clean_tokens, &p.corrupt_tokens}) {
            if (toks->empty() || toks->size() > c.max_positions)
                throw ValidationError("prompt '" + p.clean_text + "' has invalid length for this model");
            for (TokenId t : *toks)
                if (t < 0 || static_cast<size_t>(t) >= c.vocab_size)
                    throw ValidationError("prompt '" + p.clean_text + "' has token ids outside the vocabulary");
        }
    }
}

void finish(RunManifest& m, const Stopwatch& sw, const fs::path& dir) {
    m.wall_seconds = sw.seconds();
    m.write(dir / kRunManifestName);
}

// ---------------------------------------------------------------- make-toy

struct MakeToyOpts {
    std::string out;
    std::uint64_t seed = 0;
    float scale = 0.3f;
};

int cmd_make_toy(const MakeToyOpts& o) {
    Stopwatch sw;
    const fs::path out(o.out);
    const BpeVocab vocab = make_toy_vocab();
    const Weights w = make_random_model(toy_config(vocab.size()), o.seed, o.scale);
    write_model_dir(out, w, vocab, "toy-random");
    RunManifest m;
    m.command = "make-toy";
    m.seed = o.seed;
    m.config = {{"scale", o.scale}, {"model_config", config_to_json(w.config)}};
    for (const char* f : {"model.safetensors", "config.json", "vocab.json", "merges.txt", "manifest.json"})
        m.outputs.push_back((out / f).string());
    finish(m, sw, out);
    std::cout << "toy model (vocab " << vocab.size() << ") written to " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- gen-data

struct GenDataOpts {
    std::string model, task, out;
    std::uint64_t seed = 0;
    std::optional<size_t> train, val, test;
    size_t scale_down = 1;
};

int cmd_gen_data(const GenDataOpts& o) {
    Stopwatch sw;
    const fs::path model_dir(o.model), out(o.out);
    const BpeVocab vocab = BpeVocab::load(model_dir / "vocab.json", model_dir / "merges.txt");
    const Task task = parse_task(o.task);
    SplitSpec split = SplitSpec::defaults(task).scaled_down(o.scale_down);
    if (o.train) split.train = *o.train;
    if (o.val) split.val = *o.val;
    if (o.test) split.test = *o.test;
    const Corpus c = make_corpus(task, split, o.seed, vocab);
    write_corpus(out, c);
    RunManifest m;
    m.command = "gen-data";
    m.seed = o.seed;
    m.config = {{"task", task_name(task)}, {"train", split.train}, {"val", split.val}, {"test", split.test}};
    m.hash_input("vocab.json", model_dir / "vocab.json");
    m.hash_input("merges.txt", model_dir / "merges.txt");
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) m.outputs.push_back((out / f).string());
    finish(m, sw, out);
    std::cout << task_name(task) << ": " << split.train << "/" << split.val << "/" << split.test << " prompts -> "
              << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- decompose

struct DecomposeOpts {
    std::string model, out, kinds = "all";
    double rank_tol = kDefaultRankTol;
    unsigned threads = 1;
};

int cmd_decompose(const DecomposeOpts& o) {
    Stopwatch sw;
    const fs::path model_dir(o.model);
    const ModelBundle b = load_model_dir(model_dir);
    const fs::path out = o.out.empty() ? default_svd_dir(model_dir) : fs::path(o.out);
    if (!(o.rank_tol >= 0.0 && o.rank_tol < 1.0)) throw ValidationError("--rank-tol must be in [0, 1)");
    const auto kinds = parse_kinds(o.kinds);
    const SvdCache svd = decompose(b.weights, kinds, o.rank_tol, o.threads);
    fs::create_directories(out);
    RunManifest m;
    m.command = "decompose";
    m.config = {{"kinds", kinds_json(kinds)}, {"rank_tol", o.rank_tol}, {"threads", o.threads}};
    m.hash_input("model.safetensors", model_dir / "model.safetensors");
    std::map<std::string, std::set<size_t>> ranks;
    for (const auto& [id, f] : svd) {
        save_factors(out, f);
        m.outputs.push_back((out / (cache_stem(id) + ".safetensors")).string());
        ranks[kind_name(id.kind)].insert(f.rank());
    }
    finish(m, sw, out);
    for (const auto& [k, rs] : ranks) {
        std::cout << k << " rank:";
        for (size_t r : rs) std::cout << " " << r;
        std::cout << "\n";
    }
    std::cout << svd.size() << " components cached in " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- train-masks

struct TrainOpts {
    std::string model, svd, task, out, data, config, kinds;
    std::uint64_t seed = 0;
    size_t scale_down = 1;
    TrainConfig flags;
    unsigned threads = 1;
    CLI::App* app = nullptr;
};

TrainConfig resolve_train_config(const TrainOpts& o, Json& sources) {
    TrainConfig cfg;
    sources = Json::object();
    if (!o.config.empty()) {
        const Json file = read_json(o.config);
        cfg = TrainConfig::from_json(file, cfg);
        for (const auto& [k, v] : file.items()) sources[k] = "file";
    }
    auto flag = [&](const char* name, auto TrainConfig::*field) {
        if (o.app->count(std::string("--") + name)) {
            cfg.*field = o.flags.*field;
            std::string key(name);
            for (auto& ch : key)
                if (ch == '-') ch = '_';
            sources[key] = "flag";
        }
    };
    flag("epochs", &TrainConfig::max_epochs);
    flag("batch-size", &TrainConfig::batch_size);
    flag("lr", &TrainConfig::learning_rate);
    flag("weight-decay", &TrainConfig::weight_decay);
    flag("l1-weight", &TrainConfig::l1_weight);
    flag("patience", &TrainConfig::early_stop_patience);
    flag("min-delta", &TrainConfig::min_delta);
    flag("init", &TrainConfig::init_value);
    if (o.app->count("--seed")) {
        cfg.seed = o.seed;
        sources["seed"] = "flag";
    }
    cfg.threads = o.threads;
    cfg.validate();
    return cfg;
}

int cmd_train_masks(const TrainOpts& o) {
    Stopwatch sw;
    const fs::path model_dir(o.model), out(o.out);
    const ModelBundle b = load_model_dir(model_dir);
    const Weights& w = b.weights;
    const fs::path svd_dir = o.svd.empty() ? default_svd_dir(model_dir) : fs::path(o.svd);
    SvdCache svd = load_svd_for(svd_dir);
    if (!o.kinds.empty()) {
        const auto keep = parse_kinds(o.kinds);
        std::erase_if(svd, [&](const auto& e) { return std::find(keep.begin(), keep.end(), e.first.kind) == keep.end(); });
        if (svd.empty()) throw ValidationError("no cached components match --kinds " + o.kinds);
    }
    Json sources;
    const TrainConfig cfg = resolve_train_config(o, sources);
    const Task task = parse_task(o.task);

    Corpus corpus;
    if (!o.data.empty()) {
        corpus = load_prompts(o.data);
        if (corpus.task != task) throw ValidationError("corpus task does not match --task " + o.task);
    } else {
        corpus = make_corpus(task, SplitSpec::defaults(task).scaled_down(o.scale_down), cfg.seed, b.vocab);
        write_corpus(out / "data", corpus);
    }
    if (corpus.train.empty()) throw ValidationError("training split is empty");
    for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) check_tokens(*split, w.config);

    std::cerr << "preparing " << corpus.train.size() << "/" << corpus.val.size() << "/" << corpus.test.size()
              << " prompts\n";
    const auto train_set = prepare_examples(token_pairs(corpus.train), w, svd, cfg.threads);
    const auto val_set = prepare_examples(token_pairs(corpus.val), w, svd, cfg.threads);
    const TrainResult res = train(train_set, val_set, w, svd, cfg, [](const EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << "  train_kl " << r.train_kl << "  val_kl " << r.val_kl << "  sparsity "
                  << r.sparsity << "\n";
    });

    std::vector<ComponentKind> kinds_present;
    for (const auto& [id, f] : svd)
        if (std::find(kinds_present.begin(), kinds_present.end(), id.kind) == kinds_present.end())
            kinds_present.push_back(id.kind);
    std::sort(kinds_present.begin(), kinds_present.end());

    MaskCheckpoint ckpt;
    ckpt.masks = res.masks;
    ckpt.task = task_name(task);
    ckpt.config = {{"train", cfg.to_json()},
                   {"sources", sources},
                   {"model_config", config_to_json(w.config)},
                   {"kinds", kinds_json(kinds_present)},
                   {"rank_tol", svd.begin()->second.rank_tol}};
    ckpt.epoch = res.best_epoch;
    ckpt.val_kl = res.best_val_kl;
    save_checkpoint(out / "masks.safetensors", ckpt);

    std::string hist = "epoch,train_kl,train_l1,val_kl,sparsity,clamp_events\n";
    for (const auto& r : res.history) {
        hist += std::to_string(r.epoch) + "," + format_number(r.train_kl) + "," + format_number(r.train_l1) + "," +
                format_number(r.val_kl) + "," + format_number(r.sparsity) + "," + std::to_string(r.clamp_events) + "\n";
    }
    write_text(out / "history.csv", hist);

    // Test-split fidelity of the pruned model, and the full model for reference.
    const auto& eval_pairs = corpus.test.empty() ? corpus.val : corpus.test;
    std::vector<double> kls(eval_pairs.size()), acc, em, full_acc, full_em;
    std::vector<TaskRecord> masked_rec(eval_pairs.size()), full_rec(eval_pairs.size());
    parallel_for(eval_pairs.size(), cfg.threads, [&](size_t i) {
        const auto& p = eval_pairs[i];
        const TrainExample ex = prepare_example(p.clean_tokens, p.corrupt_tokens, w, svd);
        const MaskedOutput mo = masked_forward(ex.clean, ex.corrupt, w, svd, res.masks);
        kls[i] = kl_divergence(ex.p_clean, softmax(mo.logits.row(0)));
        masked_rec[i] = task_metric(mo.logits, p);
        full_rec[i] = task_metric(forward(p.clean_tokens, w).logits, p);
    });
    for (size_t i = 0; i < eval_pairs.size(); ++i) {
        if (masked_rec[i].accuracy) acc.push_back(*masked_rec[i].accuracy);
        if (full_rec[i].accuracy) full_acc.push_back(*full_rec[i].accuracy);
        em.push_back(masked_rec[i].exact_match);
        full_em.push_back(full_rec[i].exact_match);
    }
    const SparsityReport sp =
        sparsity(res.masks, kActiveThreshold, total_directions(w.config, kinds_present));
    FidelityRow row;
    row.task = task_name(task);
    row.n = eval_pairs.size();
    std::tie(row.kl_mean, row.kl_std) = mean_std(kls);
    if (!acc.empty()) {
        auto [m, s] = mean_std(acc);
        row.accuracy_mean = m;
        row.accuracy_std = s;
    }
    std::tie(row.exact_match_mean, row.exact_match_std) = mean_std(em);
    row.sparsity = sp;
    Json eval;
    eval["fidelity"] = to_json(row);
    eval["full_model"] = {{"accuracy", full_acc.empty() ? Json(nullptr) : Json(mean_std(full_acc).first)},
                          {"exact_match", mean_std(full_em).first}};
    eval["best_epoch"] = res.best_epoch;
    eval["best_val_kl"] = res.best_val_kl;
    eval["stopped_early"] = res.stopped_early;
    eval["epochs_run"] = res.history.size();
    write_json(out / "eval.json", eval);

    RunManifest m;
    m.command = "train-masks";
    m.seed = cfg.seed;
    m.config = {{"task", task_name(task)}, {"train", cfg.to_json()}, {"sources", sources}};
    m.hash_input("model.safetensors", model_dir / "model.safetensors");
    if (!o.data.empty() && fs::is_directory(o.data)) {
        for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"})
            if (fs::exists(fs::path(o.data) / f)) m.hash_input(f, fs::path(o.data) / f);
    }
    for (const char* f : {"masks.safetensors", "masks.json", "history.csv", "eval.json"})
        m.outputs.push_back((out / f).string());
    finish(m, sw, out);
    std::cout << "best epoch " << res.best_epoch << " val_kl " << res.best_val_kl << "; test kl " << row.kl_mean
              << ", S_rel " << sp.s_rel << ", S_full " << sp.s_full << "\n";
    return 0;
}

// ---------------------------------------------------------------- intervene

struct InterveneOpts {
    std::string model, svd, spec, data, out, split = "test", experiment = "custom", contexts, sigma_scales;
    unsigned threads = 1;
};

std::vector<PromptPair> pick_split(const Corpus& c, const std::string& split) {
    if (split == "train") return c.train;
    if (split == "val") return c.val;
    if (split == "test") return c.test;
    if (split == "all") {
        std::vector<PromptPair> all = c.train;
        all.insert(all.end(), c.val.begin(), c.val.end());
        all.insert(all.end(), c.test.begin(), c.test.end());
        return all;
    }
    throw ValidationError("--split must be train, val, test or all");
}

Gender label_of(const PromptPair& p) {
    if (!p.metadata.contains("gender")) throw ValidationError("prompt '" + p.clean_text + "' has no gender label");
    return parse_gender(p.metadata["gender"].get<std::string>());
}

int cmd_intervene(const InterveneOpts& o) {
    Stopwatch sw;
    const fs::path model_dir(o.model), out(o.out);
    const ModelBundle b = load_model_dir(model_dir);
    const Weights& w = b.weights;
    const fs::path svd_dir = o.svd.empty() ? default_svd_dir(model_dir) : fs::path(o.svd);
    const SvdCache svd = load_svd_for(svd_dir);
    const InterventionSpec base = InterventionSpec::from_json(read_json(o.spec));
    base.check_against(svd);
    const Corpus corpus = load_prompts(o.data);
    if (corpus.task != Task::GP) throw ValidationError("intervene needs a gendered-pronoun (gp) corpus");
    const auto prompts = pick_split(corpus, o.split);
    check_tokens(prompts, w.config);
    const TokenId he = b.vocab.single_token(" he"), she = b.vocab.single_token(" she");
    if (he < 0 || she < 0) throw ValidationError("vocabulary lacks single-token \" he\"/\" she\"");

    std::vector<Gender> contexts;
    if (o.contexts.empty()) {
        contexts.push_back(base.target);
    } else {
        for (const auto& c : split_list(o.contexts)) contexts.push_back(parse_gender(c));
    }
    std::vector<double> scales;
    if (o.sigma_scales.empty()) {
        scales.push_back(base.sigma_scale);
    } else {
        for (const auto& s : split_list(o.sigma_scales)) {
            double v = 0.0;
            try {
                v = std::stod(s);
            } catch (const std::exception&) {
                throw ValidationError("--sigma-scales: '" + s + "' is not a number");
            }
            if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("--sigma-scales entries must be finite and >= 0");
            scales.push_back(v);
        }
    }

    std::vector<InterventionRow> rows;
    for (Gender ctx : contexts) {
        std::vector<const PromptPair*> sel;
        for (const auto& p : prompts)
            if (label_of(p) == ctx) sel.push_back(&p);
        if (sel.empty()) {
            std::cerr << "no " << gender_name(ctx) << "-context prompts; skipped\n";
            continue;
        }
        std::vector<ActivationCache> caches(sel.size());
        parallel_for(sel.size(), o.threads, [&](size_t i) { caches[i] = forward(sel[i]->clean_tokens, w).cache; });
        const std::vector<Gender> labels(sel.size(), ctx);
        for (double scale : scales) {
            InterventionSpec spec = base;
            spec.target = ctx;
            spec.sigma_scale = scale;
            std::vector<Tensor> baseline(sel.size()), intervened(sel.size());
            parallel_for(sel.size(), o.threads, [&](size_t i) {
                auto r = apply_intervention(caches[i], w, svd, spec);
                baseline[i] = std::move(r.baseline);
                intervened[i] = std::move(r.intervened);
            });
            const FlipReport f = flip_metrics(baseline, intervened, labels, he, she);
            InterventionRow row;
            row.experiment = o.experiment;
            row.sigma_scale = scale;
            row.context = gender_name(ctx);
            row.n = f.n;
            row.baseline_mean = f.baseline_mean;
            row.baseline_std = f.baseline_std;
            row.intervened_mean = f.intervened_mean;
            row.intervened_std = f.intervened_std;
            row.flip_to_she = f.flip_to_she;
            row.flip_to_he = f.flip_to_he;
            rows.push_back(row);
        }
    }
    fs::create_directories(out);
    write_text(out / "interventions.csv", interventions_csv(rows));
    Json j;
    j["spec"] = base.to_json();
    j["rows"] = Json::array();
    for (const auto& r : rows) j["rows"].push_back(to_json(r));
    write_json(out / "intervention.json", j);

    RunManifest m;
    m.command = "intervene";
    m.config = {{"spec", base.to_json()}, {"split", o.split}, {"experiment", o.experiment}};
    m.hash_input("model.safetensors", model_dir / "model.safetensors");
    m.hash_input("spec", o.spec);
    m.outputs = {(out / "interventions.csv").string(), (out / "intervention.json").string()};
    finish(m, sw, out);
    std::cout << interventions_csv(rows);
    return 0;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeOpts {
    std::string model, svd, masks, data, out, ov_dirs, qk_dirs, split = "all";
    size_t top_n = 10;
    unsigned threads = 1;
};

// "L9.H1.S31": QK direction in 1-based S_k notation.
std::pair<ComponentId, size_t> parse_qk_direction(const std::string& s) {
    const auto dot = s.rfind(".S");
    if (dot == std::string::npos) throw ValidationError("malformed QK direction '" + s + "' (expected L9.H1.S31)");
    size_t k = 0;
    try {
        k = std::stoul(s.substr(dot + 2));
    } catch (const std::exception&) {
        throw ValidationError("malformed QK direction '" + s + "' (expected L9.H1.S31)");
    }
    if (k == 0) throw ValidationError("QK direction index is 1-based: '" + s + "'");
    ComponentId id = ComponentId::parse(s.substr(0, dot) + ".qk");
    return {id, k - 1};
}

bool valid_utf8(const std::string& s) {
    size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        const size_t n = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
        if (n == 0 || i + n > s.size()) return false;
        for (size_t k = 1; k < n; ++k)
            if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
        i += n;
    }
    return true;
}

// Decoded text, or the byte-level symbol when the token is a partial UTF-8 sequence.
std::string display_token(const BpeVocab& vocab, TokenId t) {
    std::string text = vocab.token_text(t);
    return valid_utf8(text) ? text : vocab.token(t);
}

std::optional<size_t> target_position(const PromptPair& p, const BpeVocab& vocab) {
    auto find_token = [&](TokenId t) -> std::optional<size_t> {
        for (size_t i = 0; i < p.clean_tokens.size(); ++i)
            if (p.clean_tokens[i] == t) return i;
        return std::nullopt;
    };
    switch (p.task) {
        case Task::IOI: return find_token(vocab.single_token(" " + p.metadata.at("io").get<std::string>()));
        case Task::GP: return find_token(vocab.single_token(" " + p.metadata.at("name").get<std::string>()));
        case Task::GT: {
            const int yy = p.metadata.at("year").get<int>() % 100;
            char buf[8];
            std::snprintf(buf, sizeof buf, "%02d", yy);
            return find_token(vocab.single_token(buf));
        }
    }
    return std::nullopt;
}

int cmd_analyze(const AnalyzeOpts& o) {
    Stopwatch sw;
    const fs::path model_dir(o.model), out(o.out);
    const ModelBundle b = load_model_dir(model_dir);
    const Weights& w = b.weights;
    const fs::path svd_dir = o.svd.empty() ? default_svd_dir(model_dir) : fs::path(o.svd);
    const SvdCache svd = load_svd_for(svd_dir);
    std::optional<MaskCheckpoint> ckpt;
    if (!o.masks.empty()) ckpt = load_checkpoint(o.masks);
    std::vector<PromptPair> prompts;
    if (!o.data.empty()) {
        prompts = pick_split(load_prompts(o.data), o.split);
        check_tokens(prompts, w.config);
    }
    auto mask_of = [&](const ComponentId& id, size_t k) -> std::optional<double> {
        if (!ckpt || !ckpt->masks.masks.count(id)) return std::nullopt;
        const Tensor& m = ckpt->masks.at(id);
        return k < m.size() ? std::optional<double>(m[k]) : std::nullopt;
    };
    std::vector<ActivationCache> caches;
    if (!prompts.empty()) {
        caches.resize(prompts.size());
        parallel_for(prompts.size(), o.threads, [&](size_t i) { caches[i] = forward(prompts[i].clean_tokens, w).cache; });
    }

    Json j;
    j["directions"] = Json::array();
    for (const auto& ds : split_list(o.ov_dirs)) {
        const DirectionRef d = DirectionRef::parse(ds);
        auto it = svd.find(d.component());
        if (it == svd.end()) throw ValidationError(d.str() + " is not in the SVD cache");
        const LogitReceptor rec = logit_receptor(it->second, d.direction, w, o.top_n);
        DirectionRow row;
        row.direction = d.str();
        row.mask = mask_of(d.component(), d.direction);
        row.sigma = rec.sigma;
        for (TokenId t : rec.top_tokens) row.top_tokens.push_back(display_token(b.vocab, t));
        if (!prompts.empty()) {
            if (prompts.front().task != Task::GP)
                throw ValidationError("conditional means need a gendered-pronoun (gp) corpus");
            std::vector<double> acts;
            std::vector<Gender> labels;
            for (size_t i = 0; i < prompts.size(); ++i) {
                acts.push_back(direction_activation(caches[i], it->second, d.direction));
                labels.push_back(label_of(prompts[i]));
            }
            const ConditionalMeans cm = conditional_means(acts, labels);
            row.mu_he = cm.mu_he;
            row.sd_he = cm.sd_he;
            row.mu_she = cm.mu_she;
            row.sd_she = cm.sd_she;
        }
        j["directions"].push_back(to_json(row));
    }

    j["direction_stats"] = Json::array();
    j["heatmaps"] = Json::array();
    const auto qk_list = split_list(o.qk_dirs);
    if (!qk_list.empty() && prompts.empty()) throw ValidationError("--qk-directions needs --data");
    const TokenClassifier classifier = TokenClassifier::defaults();
    for (const auto& qs : qk_list) {
        const auto [id, k] = parse_qk_direction(qs);
        auto it = svd.find(id);
        if (it == svd.end()) throw ValidationError(id.str() + " is not in the SVD cache");
        std::vector<ScoredPrompt> scored;
        for (size_t i = 0; i < prompts.size(); ++i) {
            ScoredPrompt sp;
            for (TokenId t : prompts[i].clean_tokens) sp.token_texts.push_back(display_token(b.vocab, t));
            sp.x = caches[i].layers.at(id.layer).ln1_out;
            sp.target = target_position(prompts[i], b.vocab);
            scored.push_back(std::move(sp));
        }
        const DirectionStats st = direction_token_stats(it->second, k, scored, classifier, mask_of(id, k));
        j["direction_stats"].push_back(to_json(st));
        // Score map for the first prompt: query rows, key columns, causal.
        const auto& first = scored.front();
        Heatmap hm;
        hm.name = "L" + std::to_string(id.layer) + "_H" + std::to_string(*id.head) + "_S" + std::to_string(k + 1);
        hm.title = id.str() + " S" + std::to_string(k + 1) + " attention scores";
        hm.row_labels = first.token_texts;
        hm.col_labels = first.token_texts;
        const size_t T = first.x.rows();
        hm.values.assign(T, std::vector<double>(T, 0.0));
        for (size_t q = 0; q < T; ++q)
            for (size_t kk = 0; kk <= q; ++kk)
                hm.values[q][kk] = direction_attention_score(it->second, k, first.x.row(q), first.x.row(kk));
        j["heatmaps"].push_back(to_json(hm));
    }
    if (ckpt) {
        const auto heads = head_mask_summary(ckpt->masks, ComponentKind::QK, ioi_head_groups());
        std::set<std::pair<size_t, size_t>> nm{{9, 6}, {9, 9}, {10, 0}}, circuit;
        for (const auto& [h, g] : ioi_head_groups()) circuit.insert(h);
        if (!heads.empty())
            j["qk_group_means"] = {{"name_mover", mean_over(heads, nm)}, {"non_circuit", mean_excluding(heads, circuit)}};
    }
    fs::create_directories(out);
    write_json(out / "analysis.json", j);

    RunManifest m;
    m.command = "analyze";
    m.config = {{"ov_directions", o.ov_dirs}, {"qk_directions", o.qk_dirs}, {"split", o.split}, {"top_n", o.top_n}};
    m.hash_input("model.safetensors", model_dir / "model.safetensors");
    if (!o.masks.empty()) m.hash_input("masks", o.masks);
    m.outputs = {(out / "analysis.json").string()};
    finish(m, sw, out);
    std::cout << "analysis written to " << (out / "analysis.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- report

struct ReportOpts {
    std::string run, out, analysis, intervention;
};

int cmd_report(const ReportOpts& o) {
    Stopwatch sw;
    const fs::path run(o.run);
    const fs::path out = o.out.empty() ? run / "report" : fs::path(o.out);
    std::vector<std::string> missing;
    for (const char* f : {"masks.safetensors", "masks.json"})
        if (!fs::exists(run / f)) missing.push_back((run / f).string());
    const fs::path analysis = o.analysis.empty() ? run / "analysis" / "analysis.json" : fs::path(o.analysis);
    const fs::path intervention = o.intervention.empty() ? run / "intervention" / "intervention.json" : fs::path(o.intervention);
    if (!o.analysis.empty() && !fs::exists(analysis)) missing.push_back(analysis.string());
    if (!o.intervention.empty() && !fs::exists(intervention)) missing.push_back(intervention.string());
    if (!missing.empty()) {
        std::string msg = "missing report inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw ValidationError(msg);
    }
    const MaskCheckpoint ckpt = load_checkpoint(run / "masks.safetensors");
    if (!ckpt.config.contains("model_config")) throw ValidationError("masks.json lacks model_config");
    const ModelConfig mc = config_from_json(ckpt.config["model_config"]);
    std::vector<ComponentKind> kinds;
    for (const auto& k : ckpt.config.value("kinds", Json::array())) kinds.push_back(parse_kind(k.get<std::string>()));
    if (kinds.empty()) kinds = parse_kinds("all");

    ReportInputs in;
    in.config = mc;
    in.masks = ckpt.masks;
    in.sparsity_all = sparsity(ckpt.masks, kActiveThreshold, total_directions(mc, kinds));
    in.sparsity_ov = sparsity_ov_only(ckpt.masks, kActiveThreshold, mc);
    RunManifest m;
    m.command = "report";
    m.hash_input("masks.safetensors", run / "masks.safetensors");
    if (fs::exists(run / "eval.json")) {
        FidelityRow row = fidelity_row_from_json(read_json(run / "eval.json").at("fidelity"));
        row.sparsity = *in.sparsity_all;
        in.fidelity.push_back(row);
        m.hash_input("eval.json", run / "eval.json");
    }
    if (fs::exists(analysis)) {
        const Json a = read_json(analysis);
        for (const auto& r : a.value("directions", Json::array())) in.directions.push_back(direction_row_from_json(r));
        for (const auto& r : a.value("direction_stats", Json::array()))
            in.direction_stats.push_back(direction_stats_from_json(r));
        for (const auto& r : a.value("heatmaps", Json::array())) in.heatmaps.push_back(heatmap_from_json(r));
        m.hash_input("analysis.json", analysis);
    }
    if (fs::exists(intervention)) {
        const Json iv = read_json(intervention);
        for (const auto& r : iv.value("rows", Json::array())) in.interventions.push_back(intervention_row_from_json(r));
        m.hash_input("intervention.json", intervention);
    }
    in.extra = {{"task", ckpt.task}, {"best_epoch", ckpt.epoch}, {"best_val_kl", ckpt.val_kl}};
    const auto files = export_report(in, out);
    m.config = {{"run", run.string()}};
    for (const auto& f : files) m.outputs.push_back(f.string());
    finish(m, sw, out);
    std::cout << files.size() << " report files written to " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dlens: singular-direction masks for GPT-2-class models"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.fallthrough();
    unsigned threads = 1;
    app.add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u));

    MakeToyOpts toy;
    auto* c_toy = app.add_subcommand("make-toy", "Write a seeded random toy model directory");
    c_toy->add_option("--out", toy.out, "Output model directory")->required();
    c_toy->add_option("--seed", toy.seed, "Weight seed");
    c_toy->add_option("--scale", toy.scale, "Weight standard deviation");

    GenDataOpts gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate a prompt corpus");
    c_gen->add_option("--model", gen.model, "Model directory (for the tokenizer)")->required();
    c_gen->add_option("--task", gen.task, "ioi, gt or gp")->required();
    c_gen->add_option("--out", gen.out, "Output corpus directory")->required();
    c_gen->add_option("--seed", gen.seed, "Generator seed");
    c_gen->add_option("--train", gen.train, "Train split size");
    c_gen->add_option("--val", gen.val, "Validation split size");
    c_gen->add_option("--test", gen.test, "Test split size");
    c_gen->add_option("--scale-down", gen.scale_down, "Divide default split sizes by this factor")->check(CLI::PositiveNumber);

    DecomposeOpts dec;
    auto* c_dec = app.add_subcommand("decompose", "SVD of augmented matrices");
    c_dec->add_option("--model", dec.model, "Model directory")->required();
    c_dec->add_option("--out", dec.out, "SVD cache directory (default $DLENS_CACHE_DIR/svd/<model hash>)");
    c_dec->add_option("--kinds", dec.kinds, "Comma list of qk,ov,mlp_in,mlp_out or all");
    c_dec->add_option("--rank-tol", dec.rank_tol, "Relative rank tolerance");

    TrainOpts tr;
    auto* c_tr = app.add_subcommand("train-masks", "Learn direction masks for a task");
    tr.app = c_tr;
    c_tr->add_option("--model", tr.model, "Model directory")->required();
    c_tr->add_option("--svd", tr.svd, "SVD cache directory");
    c_tr->add_option("--task", tr.task, "ioi, gt or gp")->required();
    c_tr->add_option("--out", tr.out, "Run directory")->required();
    c_tr->add_option("--data", tr.data, "Corpus directory (generated when absent)");
    c_tr->add_option("--scale-down", tr.scale_down, "Divide default split sizes when generating")->check(CLI::PositiveNumber);
    c_tr->add_option("--config", tr.config, "JSON training config");
    c_tr->add_option("--kinds", tr.kinds, "Restrict to these component kinds");
    c_tr->add_option("--seed", tr.seed, "Seed for data order and generation");
    c_tr->add_option("--epochs", tr.flags.max_epochs, "Maximum epochs");
    c_tr->add_option("--batch-size", tr.flags.batch_size, "Batch size");
    c_tr->add_option("--lr", tr.flags.learning_rate, "Learning rate");
    c_tr->add_option("--weight-decay", tr.flags.weight_decay, "Decoupled weight decay");
    c_tr->add_option("--l1-weight", tr.flags.l1_weight, "Sparsity penalty lambda");
    c_tr->add_option("--patience", tr.flags.early_stop_patience, "Early-stop patience (0 disables)");
    c_tr->add_option("--min-delta", tr.flags.min_delta, "Validation KL tie tolerance");
    c_tr->add_option("--init", tr.flags.init_value, "Initial mask value");

    InterveneOpts iv;
    auto* c_iv = app.add_subcommand("intervene", "Swap OV direction activations and measure pronoun flips");
    c_iv->add_option("--model", iv.model, "Model directory")->required();
    c_iv->add_option("--svd", iv.svd, "SVD cache directory");
    c_iv->add_option("--spec", iv.spec, "Intervention spec JSON")->required();
    c_iv->add_option("--data", iv.data, "gp corpus directory or .jsonl file")->required();
    c_iv->add_option("--out", iv.out, "Output directory")->required();
    c_iv->add_option("--split", iv.split, "train, val, test or all");
    c_iv->add_option("--experiment", iv.experiment, "Experiment label");
    c_iv->add_option("--contexts", iv.contexts, "Comma list of he,she (default: spec target)");
    c_iv->add_option("--sigma-scales", iv.sigma_scales, "Comma list overriding the spec's sigma_scale");

    AnalyzeOpts an;
    auto* c_an = app.add_subcommand("analyze", "Logit receptors, conditional means and QK direction statistics");
    c_an->add_option("--model", an.model, "Model directory")->required();
    c_an->add_option("--svd", an.svd, "SVD cache directory");
    c_an->add_option("--masks", an.masks, "Mask checkpoint");
    c_an->add_option("--data", an.data, "Corpus directory or .jsonl file");
    c_an->add_option("--split", an.split, "train, val, test or all");
    c_an->add_option("--out", an.out, "Output directory")->required();
    c_an->add_option("--ov-directions", an.ov_dirs, "Comma list like L9.H7.SV1 (0-based)");
    c_an->add_option("--qk-directions", an.qk_dirs, "Comma list like L9.H1.S31 (1-based)");
    c_an->add_option("--top-n", an.top_n, "Receptor tokens to list");

    ReportOpts rp;
    auto* c_rp = app.add_subcommand("report", "Tables, JSON and SVG figures for a run directory");
    c_rp->add_option("--run", rp.run, "Run directory from train-masks")->required();
    c_rp->add_option("--out", rp.out, "Output directory (default <run>/report)");
    c_rp->add_option("--analysis", rp.analysis, "analysis.json (default <run>/analysis/analysis.json)");
    c_rp->add_option("--intervention", rp.intervention, "intervention.json (default <run>/intervention/intervention.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*c_toy) return cmd_make_toy(toy);
        if (*c_gen) return cmd_gen_data(gen);
        if (*c_dec) {
            dec.threads = threads;
            return cmd_decompose(dec);
        }
        if (*c_tr) {
            tr.threads = threads;
            return cmd_train_masks(tr);
        }
        if (*c_iv) {
            iv.threads = threads;
            return cmd_intervene(iv);
        }
        if (*c_an) {
            an.threads = threads;
            return cmd_analyze(an);
        }
        if (*c_rp) return cmd_report(rp);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
