#include <fstream>

#include "doctest.h"
#include "dlens/archive.hpp"
#include "dlens/error.hpp"
#include "dlens/model_dir.hpp"
#include "dlens/tasks.hpp"
#include "dlens/util.hpp"
#include "fixtures.hpp"

using namespace dlens;

TEST_CASE("archive round-trips tensors bit-exactly") {
    const auto dir = fixture::temp_dir("archive");
    TensorArchive a;
    a.tensors["x"] = Tensor({2, 3}, {1.5f, -2.0f, 3.25f, 0.0f, -0.0f, 1e-30f});
    a.tensors["scalar"] = Tensor::vector(1, 7.0f);
    a.metadata["format"] = "pt";
    write_archive(dir / "a.safetensors", a);
    const TensorArchive b = read_archive(dir / "a.safetensors");
    CHECK(b.tensors.size() == 2);
    CHECK(b.at("x") == a.at("x"));
    CHECK(b.at("scalar") == a.at("scalar"));
    CHECK(b.metadata.at("format") == "pt");
}

TEST_CASE("archive rejects malformed input") {
    const auto dir = fixture::temp_dir("archive_bad");
    write_text(dir / "short.bin", "abc");
    CHECK_THROWS_AS(read_archive(dir / "short.bin"), ValidationError);
    std::string huge(8, '\0');
    huge[0] = '\x7f';
    huge[1] = '\x7f';
    write_text(dir / "huge.bin", huge);
    CHECK_THROWS_AS(read_archive(dir / "huge.bin"), ValidationError);
    const std::string hdr = "{\"x\":{\"dtype\":\"F16\",\"shape\":[1],\"data_offsets\":[0,2]}}";
    std::string bytes(8, '\0');
    bytes[0] = static_cast<char>(hdr.size());
    write_text(dir / "f16.bin", bytes + hdr + "ab");
    CHECK_THROWS_AS(read_archive(dir / "f16.bin"), ValidationError);
    CHECK_THROWS_AS(read_archive(dir / "nope.bin"), ValidationError);
}

TEST_CASE("weights round-trip through the checkpoint layout") {
    const auto dir = fixture::temp_dir("weights");
    const Weights w = fixture::small_model(3);
    save_weights(dir / "m.safetensors", w);
    const Weights r = load_weights(dir / "m.safetensors", w.config);
    CHECK(r.token_embedding == w.token_embedding);
    CHECK(r.w_u == w.w_u);
    for (size_t l = 0; l < w.config.n_layers; ++l) {
        for (size_t h = 0; h < w.config.n_heads; ++h) {
            CHECK(r.layers[l].w_q[h] == w.layers[l].w_q[h]);
            CHECK(r.layers[l].w_k[h] == w.layers[l].w_k[h]);
            CHECK(r.layers[l].w_v[h] == w.layers[l].w_v[h]);
            CHECK(r.layers[l].w_o[h] == w.layers[l].w_o[h]);
            CHECK(r.layers[l].b_v[h] == w.layers[l].b_v[h]);
        }
        CHECK(r.layers[l].w_out == w.layers[l].w_out);
        CHECK(r.layers[l].b_o.values().size() == w.layers[l].b_o.size());
    }
}

TEST_CASE("missing tensor is named") {
    const auto dir = fixture::temp_dir("missing");
    const Weights w = fixture::small_model(3);
    TensorArchive a = weights_to_archive(w);
    a.tensors.erase("h.1.mlp.c_fc.bias");
    try {
        weights_from_archive(a, w.config);
        FAIL("expected an error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("h.1.mlp.c_fc.bias") != std::string::npos);
    }
}

TEST_CASE("model directory manifest is verified") {
    const auto dir = fixture::temp_dir("modeldir");
    const Weights w = make_random_model(toy_config(fixture::vocab().size()), 5);
    write_model_dir(dir, w, fixture::vocab());
    const ModelBundle b = load_model_dir(dir);
    CHECK(b.weights.token_embedding == w.token_embedding);
    CHECK(b.vocab.size() == fixture::vocab().size());

    Json m = read_json(dir / "manifest.json");
    m["tensors"]["wte.weight"]["checksum"] = "0000000000000000";
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_AS(load_model_dir(dir), ValidationError);

    m["tensors"].erase("wte.weight");
    write_json(dir / "manifest.json", m);
    CHECK_THROWS_WITH_AS(load_model_dir(dir), doctest::Contains("wte.weight"), ValidationError);
}

TEST_CASE("config json round trip") {
    ModelConfig c = toy_config(123);
    CHECK(config_from_json(config_to_json(c)) == c);
    CHECK(ModelConfig::gpt2_small().n_layers == 12);
    CHECK(ModelConfig::gpt2_small().vocab_size == 50257);
    c.d_head = 5;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("pretokenizer follows the GPT-2 pattern") {
    CHECK(pretokenize("So Mary isn't") == std::vector<std::string>{"So", " Mary", " isn", "'t"});
    CHECK(pretokenize("year 1314 to") == std::vector<std::string>{"year", " 1314", " to"});
    CHECK(pretokenize("a,  b") == std::vector<std::string>{"a", ",", " ", " b"});
}

TEST_CASE("toy vocabulary tokenizes task words as single tokens") {
    const auto& v = fixture::vocab();
    for (const auto& name : male_names()) CHECK(v.single_token(" " + name) >= 0);
    CHECK(v.single_token(" he") >= 0);
    CHECK(v.single_token(" she") >= 0);
    const auto ids = v.encode(" 1314");
    REQUIRE(ids.size() == 2);
    CHECK(v.token_text(ids[0]) == " 13");
    CHECK(v.token_text(ids[1]) == "14");
    const std::string text = "When Mary and John went to the store, John gave a drink to";
    CHECK(v.decode(v.encode(text)) == text);
    const std::string odd = "naïve ☃ tab\tnewline\n";
    CHECK(v.decode(v.encode(odd)) == odd);
}

TEST_CASE("tokenizer tables round-trip through files") {
    const auto dir = fixture::temp_dir("vocab");
    fixture::vocab().save(dir / "vocab.json", dir / "merges.txt");
    const BpeVocab r = BpeVocab::load(dir / "vocab.json", dir / "merges.txt");
    const std::string text = "So Kevin is a very good athlete, isn't";
    CHECK(r.encode(text) == fixture::vocab().encode(text));
}

TEST_CASE("fnv1a reference values") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("parallel_for covers every index and rethrows") {
    std::vector<int> hit(100, 0);
    parallel_for(100, 4, [&](size_t i) { hit[i] += 1; });
    for (int h : hit) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, 3, [](size_t i) {
                        if (i == 5) throw std::runtime_error("boom");
                    }),
                    std::runtime_error);
}
