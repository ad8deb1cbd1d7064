#include <cmath>
#include <sstream>

#include "doctest.h"
#include "dlens/analysis.hpp"
#include "dlens/error.hpp"
#include "dlens/report.hpp"
#include "fixtures.hpp"

using namespace dlens;

namespace {

MaskSet example_masks() {
    MaskSet m;
    m.masks[{ComponentKind::QK, 0, 0}] = Tensor({4}, {0.0f, 0.01f, 0.011f, 1.0f});
    m.masks[{ComponentKind::QK, 0, 1}] = Tensor({2}, {0.5f, 0.5f});
    m.masks[{ComponentKind::OV, 1, 0}] = Tensor({3}, {0.2f, 0.0f, 0.0f});
    m.masks[{ComponentKind::MLP_IN, 0, std::nullopt}] = Tensor({1}, {0.9f});
    return m;
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST_CASE("sparsity counts strictly above the threshold") {
    const auto r = sparsity(example_masks(), kActiveThreshold, 20);
    CHECK(r.n_learnable == 10);
    CHECK(r.n_active == 6);
    CHECK(r.s_rel == doctest::Approx(0.4));
    CHECK(r.s_full == doctest::Approx(0.7));
    CHECK(0.0 <= r.s_rel);
    CHECK(r.s_rel <= r.s_full);
    CHECK(r.s_full <= 1.0);
    const auto e = sparsity(MaskSet{}, kActiveThreshold, 0);
    CHECK(e.s_rel == 0.0);
    CHECK(e.s_full == 0.0);
}

TEST_CASE("direction totals") {
    const auto g = ModelConfig::gpt2_small();
    CHECK(total_directions(g, {ComponentKind::QK}) == 144 * 769);
    CHECK(total_directions(g, {ComponentKind::OV}) == 144 * 768);
    CHECK(total_directions(g, {ComponentKind::MLP_IN, ComponentKind::MLP_OUT}) == 12 * 769 + 12 * 768);
    const auto ov = sparsity_ov_only(example_masks(), kActiveThreshold, toy_config(10));
    CHECK(ov.n_learnable == 3);
    CHECK(ov.n_active == 1);
    CHECK(ov.n_total == 4 * 16);
}

TEST_CASE("head summary") {
    const auto t = head_mask_summary(example_masks(), ComponentKind::QK, {{{0, 1}, "x"}});
    REQUIRE(t.size() == 2);
    CHECK(t[0].mean == doctest::Approx((0.0 + 0.01 + 0.011 + 1.0) / 4).epsilon(1e-6));
    CHECK(t[0].rank == 4);
    CHECK(t[1].group == "x");
    CHECK(mean_over(t, {{0, 1}}) == doctest::Approx(0.5));
    CHECK(mean_excluding(t, {{0, 1}}) == doctest::Approx(t[0].mean));
    CHECK_THROWS_AS(head_mask_summary(example_masks(), ComponentKind::MLP_IN), ValidationError);
    CHECK(ioi_head_groups().at({9, 6}) == "name_mover");
    CHECK(ioi_head_groups().count({0, 0}) == 0);
}

TEST_CASE("token classifier") {
    const auto c = TokenClassifier::defaults();
    CHECK(c.classify(" Mary", 0) == "first");
    CHECK(c.classify(" Mary", 3) == "entity");
    CHECK(c.classify(" gave", 3) == "action");
    CHECK(c.classify(" the", 3) == "function");
    CHECK(c.classify(" 13", 3) == "number");
    CHECK(c.classify(",", 3) == "punctuation");
    CHECK(c.classify(" zebra", 3) == "other");
}

TEST_CASE("stable stats are order-invariant") {
    std::vector<double> v{1e8, 1.0, -3.5, 2.25, 1e-8, 7.0};
    const auto a = stable_stats(v);
    std::reverse(v.begin(), v.end());
    const auto b = stable_stats(v);
    std::swap(v[0], v[3]);
    const auto c = stable_stats(v);
    CHECK(a.mean == b.mean);
    CHECK(a.std == c.std);
    CHECK(stable_stats({2, 4}).std == 1.0);
}

TEST_CASE("direction token stats") {
    const Weights w = fixture::small_model(51);
    const auto f = svd(build_augmented(w, ComponentKind::QK, 0, 0));
    const auto toks = fixture::random_tokens(5, w.config.vocab_size, 1);
    const auto r = forward(toks, w);
    ScoredPrompt p{{"A", " Mary", " gave", ",", " the"}, r.cache.layers[0].ln1_out, std::nullopt};
    size_t best = 0;
    double best_s = -INFINITY;
    for (size_t j = 0; j < 5; ++j) {
        const double s = direction_attention_score(f, 0, p.x.row(4), p.x.row(j));
        if (s > best_s) best_s = s, best = j;
    }
    p.target = best;
    std::vector<ScoredPrompt> ps{p, p};
    const auto st = direction_token_stats(f, 0, ps, TokenClassifier::defaults(), 0.5);
    CHECK(st.classes.at("entity").n == 2);
    CHECK(st.classes.at("first").n == 2);
    CHECK(st.classes.at("entity").std == 0.0);
    CHECK(st.classes.at("entity").mean ==
          doctest::Approx(direction_attention_score(f, 0, p.x.row(4), p.x.row(1))));
    CHECK(*st.highest_attention_pct == 100.0);
    CHECK(st.notes.empty());
    p.target = (best + 1) % 5;
    const auto miss = direction_token_stats(f, 0, std::vector<ScoredPrompt>{p}, TokenClassifier::defaults());
    CHECK(*miss.highest_attention_pct == 0.0);
}

TEST_CASE("ties for the highest score go to the lowest position") {
    SVDFactors f;
    f.id = {ComponentKind::QK, 0, 0};
    f.u = Tensor({3, 1}, {1, 0, 0});
    f.v = Tensor({3, 1}, {1, 0, 0});
    f.sigma = Tensor({1}, {1});
    ScoredPrompt p{{"a", "b", "c"}, Tensor::matrix(3, 2), 0};
    const auto st = direction_token_stats(f, 0, std::vector<ScoredPrompt>{p}, TokenClassifier{});
    CHECK(*st.highest_attention_pct == 100.0);
    CHECK(st.notes.size() == 2);
}

TEST_CASE("number formatting round-trips") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 123456789.0, 0.0}) CHECK(std::stod(format_number(v)) == v);
    CHECK(format_number(0.5) == "0.5");
}

TEST_CASE("empty report inputs still produce every table") {
    const auto dir = fixture::temp_dir("report_empty");
    const auto files = export_report(ReportInputs{}, dir);
    for (const char* f : {"fidelity.csv", "sparsity.csv", "directions.csv", "interventions.csv", "heads.csv", "direction_stats.csv",
                          "report.json"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(lines(read_text(dir / "interventions.csv")).size() == 1);
    CHECK_FALSE(std::filesystem::exists(dir / "masks_qk.svg"));
    const Json j = read_json(dir / "report.json");
    CHECK(j["report_version"] == kReportVersion);
}

TEST_CASE("report tables agree with their sources and rerun byte-identically") {
    const auto a = fixture::temp_dir("report_a"), b = fixture::temp_dir("report_b");
    ReportInputs in;
    in.config = toy_config(10);
    in.masks = example_masks();
    in.sparsity_all = sparsity(in.masks, kActiveThreshold, 20);
    in.sparsity_ov = sparsity_ov_only(in.masks, kActiveThreshold, *in.config);
    FidelityRow fr;
    fr.task = "ioi";
    fr.n = 7;
    fr.kl_mean = 0.21;
    fr.kl_std = 0.02;
    fr.exact_match_mean = 0.77;
    fr.sparsity = *in.sparsity_all;
    in.fidelity = {fr};
    InterventionRow ir;
    ir.experiment = "swap_all";
    ir.sigma_scale = 20;
    ir.context = "he";
    ir.n = 3;
    ir.flip_to_she = 100.0;
    in.interventions = {ir};
    Heatmap h{"first_prompt", "t", {"a", "b"}, {"a", "b"}, {{1, 0}, {0.5, 0.5}}};
    in.heatmaps = {h};
    export_report(in, a);
    export_report(in, b);
    for (const auto& e : std::filesystem::directory_iterator(a))
        CHECK(read_text(e.path()) == read_text(b / e.path().filename()));
    CHECK(std::filesystem::exists(a / "masks_qk.svg"));
    CHECK(std::filesystem::exists(a / "masks_ov.svg"));
    CHECK(std::filesystem::exists(a / "masks_mlp.svg"));
    CHECK(std::filesystem::exists(a / "heatmap_first_prompt.svg"));

    const auto t1 = lines(read_text(a / "fidelity.csv"));
    REQUIRE(t1.size() == 2);
    CHECK(t1[1] == "ioi,7,0.21,0.02,N/A,N/A,0.77,0,0.4,0.7,6,10,20,0.01");
    const auto sp = lines(read_text(a / "sparsity.csv"));
    REQUIRE(sp.size() == 3);
    CHECK(sp[1] == "all_families,6,10,20,0.4,0.7,0.01");
    const auto t5 = lines(read_text(a / "interventions.csv"));
    REQUIRE(t5.size() == 2);
    CHECK(t5[1] == "swap_all,20,he,3,0,0,0,0,100,N/A");
    const Json j = read_json(a / "report.json");
    CHECK(sparsity_from_json(j["sparsity"]["all_families"]).n_active == 6);

    in.heatmaps[0].name = "../x";
    CHECK_THROWS_AS(export_report(in, a), ValidationError);
}

TEST_CASE("JSON round trips of report rows") {
    DirectionRow d{"L9.H7.SV1", 0.9, 3.5, {" he", " his"}, 0.115, 0.1, -0.453, 0.2};
    const auto d2 = direction_row_from_json(to_json(d));
    CHECK(d2.direction == d.direction);
    CHECK(d2.top_tokens == d.top_tokens);
    CHECK(*d2.mask == 0.9);
    InterventionRow r;
    r.flip_to_he = 12.5;
    const auto r2 = intervention_row_from_json(to_json(r));
    CHECK(*r2.flip_to_he == 12.5);
    CHECK_FALSE(r2.flip_to_she.has_value());
    Heatmap h{"n", "t", {"a"}, {"b"}, {{0.25}}};
    CHECK(heatmap_from_json(to_json(h)).values == h.values);
}

TEST_CASE("mask grid SVG is deterministic and well-formed") {
    const auto s1 = render_mask_grid_svg(example_masks(), {ComponentKind::QK}, "QK <masks>");
    const auto s2 = render_mask_grid_svg(example_masks(), {ComponentKind::QK}, "QK <masks>");
    CHECK(s1 == s2);
    CHECK(s1.find("<svg") != std::string::npos);
    CHECK(s1.find("&lt;masks&gt;") != std::string::npos);
    CHECK(s1.find("</svg>") != std::string::npos);
}
