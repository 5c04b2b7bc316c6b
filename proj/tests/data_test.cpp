#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "relattn/data.hpp"

using namespace relattn;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

RelationInstance make_instance(std::vector<std::string> tokens, int ss, int se, int os, int oe,
                               std::string rel, std::string id = "t1") {
    RelationInstance inst;
    inst.id = std::move(id);
    inst.pos_tags.assign(tokens.size(), "NN");
    inst.ner_tags.assign(tokens.size(), "O");
    inst.tokens = std::move(tokens);
    inst.subj_start = ss;
    inst.subj_end = se;
    inst.obj_start = os;
    inst.obj_end = oe;
    inst.relation = std::move(rel);
    return inst;
}

}  // namespace

TEST_CASE("tacred json round trip") {
    auto path = temp_file("relattn_tacred_rt.json");
    std::vector<RelationInstance> insts;
    insts.push_back(make_instance({"Yukos", "in", "Moscow"}, 0, 0, 2, 2,
                                  "org:city_of_headquarters", "e1"));
    insts.push_back(make_instance({"a", "b", "c", "d"}, 1, 2, 3, 3, "no_relation", "e2"));
    save_tacred_json(insts, path.string());
    auto loaded = load_tacred_json(path.string());
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].id == "e1");
    REQUIRE(loaded[0].tokens == insts[0].tokens);
    REQUIRE(loaded[0].pos_tags == insts[0].pos_tags);
    REQUIRE(loaded[0].ner_tags == insts[0].ner_tags);
    REQUIRE(loaded[0].subj_start == 0);
    REQUIRE(loaded[0].obj_end == 2);
    REQUIRE(loaded[0].relation == "org:city_of_headquarters");
    REQUIRE(loaded[1].subj_end == 2);
    std::filesystem::remove(path);
}

TEST_CASE("tacred loader rejects bad records") {
    auto path = temp_file("relattn_tacred_bad.json");
    {
        std::ofstream f(path);
        f << R"([{"id":"x1","token":["a","b"],"stanford_pos":["NN","NN"],
                 "stanford_ner":["O","O"],"subj_start":0,"subj_end":2,
                 "obj_start":1,"obj_end":1,"relation":"no_relation"}])";
    }
    REQUIRE_THROWS_AS(load_tacred_json(path.string()), DataError);
    {
        std::ofstream f(path);
        f << R"([{"id":"x2","token":["a"]}])";  // missing fields
    }
    REQUIRE_THROWS_MATCHES(load_tacred_json(path.string()), DataError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("x2")));
    {
        std::ofstream f(path);
        f << "[]";
    }
    REQUIRE(load_tacred_json(path.string()).empty());
    std::filesystem::remove(path);
}

TEST_CASE("build_vocab counts and ordering") {
    std::vector<std::vector<std::string>> seqs = {{"a", "a", "b"}};
    Vocab v1 = build_vocab(seqs, 1);
    REQUIRE(v1.size() == 4);  // pad, unk, a, b
    REQUIRE(v1.id("a") == 2);
    REQUIRE(v1.id("b") == 3);
    REQUIRE(v1.id("zzz") == Vocab::kUnk);

    Vocab v2 = build_vocab(seqs, 2);
    REQUIRE(v2.size() == 3);
    REQUIRE(v2.id("b") == Vocab::kUnk);

    Vocab v3 = build_vocab(seqs, 1000);
    REQUIRE(v3.size() == 2);

    // ties broken lexicographically
    std::vector<std::vector<std::string>> seqs2 = {{"z", "m", "a"}};
    Vocab v4 = build_vocab(seqs2, 1);
    REQUIRE(v4.id("a") == 2);
    REQUIRE(v4.id("m") == 3);
    REQUIRE(v4.id("z") == 4);
}

TEST_CASE("glove loader fills hits, randomizes misses, rejects bad lines") {
    auto path = temp_file("relattn_glove.txt");
    {
        std::ofstream f(path);
        f << "alpha 0.5 -0.25 1.0\n";
        f << "other 1 2 3\n";
    }
    std::vector<std::vector<std::string>> seqs = {{"alpha", "beta"}};
    Vocab v = build_vocab(seqs, 1);
    RngState rng(3);
    Tensor table = load_glove(path.string(), v, 3, rng);
    int a = v.id("alpha"), b = v.id("beta");
    REQUIRE(table.at(a, 0) == 0.5);
    REQUIRE(table.at(a, 1) == -0.25);
    REQUIRE(table.at(a, 2) == 1.0);
    for (int j = 0; j < 3; ++j) {
        REQUIRE(table.at(Vocab::kPad, j) == 0.0);
        REQUIRE(std::fabs(table.at(b, j)) <= 0.01);
    }
    // reproducible under the same seed
    RngState rng2(3);
    Tensor table2 = load_glove(path.string(), v, 3, rng2);
    for (std::size_t i = 0; i < table.size(); ++i) REQUIRE(table[i] == table2[i]);

    {
        std::ofstream f(path);
        f << "alpha 0.5 -0.25\n";  // wrong dimension
    }
    RngState rng3(3);
    REQUIRE_THROWS_AS(load_glove(path.string(), v, 3, rng3), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("encode_batch padding, mask and round trip") {
    std::vector<RelationInstance> insts;
    insts.push_back(make_instance({"a", "b", "c"}, 0, 0, 1, 1, "no_relation", "i1"));
    Vocab v = build_token_vocab(insts);
    Vocab pv = build_pos_vocab(insts);
    Vocab nv = build_ner_vocab(insts);
    LabelSet ls = LabelSet::from_instances(insts);

    Batch one = encode_batch(insts, v, pv, nv, ls);
    REQUIRE(one.size == 1);
    REQUIRE(one.max_len == 3);
    REQUIRE(one.valid == std::vector<char>{1, 1, 1});

    insts.push_back(make_instance({"a", "b", "c", "d", "e"}, 2, 2, 4, 4, "no_relation", "i2"));
    Batch two = encode_batch(insts, v, pv, nv, ls);
    REQUIRE(two.size == 2);
    REQUIRE(two.max_len == 5);
    REQUIRE(two.valid == std::vector<char>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
    // per-instance fields identical regardless of batch composition
    for (int t = 0; t < 3; ++t) REQUIRE(two.word_ids[t] == one.word_ids[t]);

    // round-trip decode reproduces tokens or the unknown marker
    for (int i = 0; i < two.size; ++i)
        for (int t = 0; t < two.lengths[i]; ++t) {
            int id = two.word_ids[i * two.max_len + t];
            const std::string& decoded = v.tokens[id];
            const std::string& original = insts[i].tokens[t];
            if (id == Vocab::kUnk)
                REQUIRE(v.id(original) == Vocab::kUnk);
            else
                REQUIRE(decoded == original);
        }

    RelationInstance bad = make_instance({"x"}, 0, 0, 0, 0, "not_a_label", "i3");
    REQUIRE_THROWS_AS(encode_batch({bad}, v, pv, nv, ls), DataError);
}

TEST_CASE("synthetic generator structure and determinism") {
    SynthConfig cfg;
    cfg.train_count = 200;
    cfg.dev_count = 50;
    cfg.test_count = 50;
    cfg.seed = 9;
    SynthSplits s1 = generate_synthetic(cfg);
    SynthSplits s2 = generate_synthetic(cfg);
    REQUIRE(s1.train.size() == 200);
    REQUIRE(s1.dev.size() == 50);
    for (std::size_t i = 0; i < s1.train.size(); ++i) {
        REQUIRE(s1.train[i].tokens == s2.train[i].tokens);
        REQUIRE(s1.train[i].relation == s2.train[i].relation);
    }

    for (const auto& inst : s1.train) {
        inst.validate();
        // the label is exactly the deterministic function of cue and side
        int cue_pos = -1;
        int cue_id = -1;
        for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
            if (inst.tokens[t].rfind("cue", 0) == 0) {
                REQUIRE(cue_pos == -1);  // at most one cue
                cue_pos = static_cast<int>(t);
                cue_id = std::stoi(inst.tokens[t].substr(3));
            }
        }
        if (cue_pos < 0) {
            REQUIRE(inst.relation == "no_relation");
        } else {
            std::string side = cue_pos < inst.subj_start ? "left" : "right";
            REQUIRE(inst.relation == "rel:cue" + std::to_string(cue_id) + ":" + side);
        }
    }
}

TEST_CASE("synthetic label distribution is balanced") {
    SynthConfig cfg;
    cfg.train_count = 10000;
    cfg.dev_count = 10;
    cfg.test_count = 10;
    SynthSplits s = generate_synthetic(cfg);
    std::map<std::string, int> counts;
    for (const auto& inst : s.train) ++counts[inst.relation];
    REQUIRE(counts.size() == 9);
    for (const auto& [label, n] : counts)
        REQUIRE(std::fabs(n / 10000.0 - 1.0 / 9.0) <= 0.02);
}
