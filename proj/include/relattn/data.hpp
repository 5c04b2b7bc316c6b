#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "relattn/errors.hpp"
#include "relattn/rng.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

struct RelationInstance {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<std::string> pos_tags;
    std::vector<std::string> ner_tags;
    int subj_start = 0, subj_end = 0;  // inclusive
    int obj_start = 0, obj_end = 0;    // inclusive
    std::string relation;

    void validate() const {
        auto n = tokens.size();
        if (n == 0) throw DataError("instance " + id + ": empty token list");
        if (pos_tags.size() != n || ner_tags.size() != n)
            throw DataError("instance " + id + ": token/pos/ner length mismatch");
        auto check_span = [&](int s, int e, const char* which) {
            if (s < 0 || e < s || e >= static_cast<int>(n))
                throw DataError("instance " + id + ": " + which + " span (" + std::to_string(s) +
                                ", " + std::to_string(e) + ") out of range for length " +
                                std::to_string(n));
        };
        check_span(subj_start, subj_end, "subject");
        check_span(obj_start, obj_end, "object");
    }
};

inline std::vector<RelationInstance> load_tacred_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("failed to parse " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw DataError(path + ": expected a JSON array of records");
    std::vector<RelationInstance> out;
    out.reserve(doc.size());
    for (const auto& rec : doc) {
        RelationInstance inst;
        std::string rid = rec.value("id", std::string("<missing id>"));
        try {
            inst.id = rec.at("id").get<std::string>();
            inst.tokens = rec.at("token").get<std::vector<std::string>>();
            inst.pos_tags = rec.at("stanford_pos").get<std::vector<std::string>>();
            inst.ner_tags = rec.at("stanford_ner").get<std::vector<std::string>>();
            inst.subj_start = rec.at("subj_start").get<int>();
            inst.subj_end = rec.at("subj_end").get<int>();
            inst.obj_start = rec.at("obj_start").get<int>();
            inst.obj_end = rec.at("obj_end").get<int>();
            inst.relation = rec.at("relation").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("record " + rid + ": " + e.what());
        }
        inst.validate();
        out.push_back(std::move(inst));
    }
    return out;
}

inline void save_tacred_json(const std::vector<RelationInstance>& instances,
                             const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& inst : instances) {
        arr.push_back({{"id", inst.id},
                       {"token", inst.tokens},
                       {"stanford_pos", inst.pos_tags},
                       {"stanford_ner", inst.ner_tags},
                       {"subj_start", inst.subj_start},
                       {"subj_end", inst.subj_end},
                       {"obj_start", inst.obj_start},
                       {"obj_end", inst.obj_end},
                       {"relation", inst.relation}});
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << arr.dump(1) << "\n";
}

// id 0 = padding, id 1 = unknown
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    std::vector<std::string> tokens{"<pad>", "<unk>"};
    std::unordered_map<std::string, int> to_id{{"<pad>", 0}, {"<unk>", 1}};

    int id(const std::string& tok) const {
        auto it = to_id.find(tok);
        return it == to_id.end() ? kUnk : it->second;
    }
    int add(const std::string& tok) {
        auto it = to_id.find(tok);
        if (it != to_id.end()) return it->second;
        int i = static_cast<int>(tokens.size());
        tokens.push_back(tok);
        to_id[tok] = i;
        return i;
    }
    std::size_t size() const { return tokens.size(); }
};

// frequency-descending then lexicographic, so vocab construction is
// deterministic across platforms
template <typename SeqRange>
Vocab build_vocab(const SeqRange& sequences, int min_count = 1) {
    std::map<std::string, long> counts;
    for (const auto& seq : sequences)
        for (const auto& tok : seq) ++counts[tok];
    std::vector<std::pair<std::string, long>> entries(counts.begin(), counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    for (const auto& [tok, cnt] : entries)
        if (cnt >= min_count) v.add(tok);
    return v;
}

inline Vocab build_token_vocab(const std::vector<RelationInstance>& instances, int min_count = 1) {
    std::vector<std::vector<std::string>> seqs;
    seqs.reserve(instances.size());
    for (const auto& inst : instances) seqs.push_back(inst.tokens);
    return build_vocab(seqs, min_count);
}

inline Vocab build_pos_vocab(const std::vector<RelationInstance>& instances) {
    std::vector<std::vector<std::string>> seqs;
    for (const auto& inst : instances) seqs.push_back(inst.pos_tags);
    return build_vocab(seqs, 1);
}

inline Vocab build_ner_vocab(const std::vector<RelationInstance>& instances) {
    std::vector<std::vector<std::string>> seqs;
    for (const auto& inst : instances) seqs.push_back(inst.ner_tags);
    return build_vocab(seqs, 1);
}

// no_relation is pinned to index 0
struct LabelSet {
    static constexpr const char* kNoRelation = "no_relation";

    std::vector<std::string> labels{kNoRelation};
    std::unordered_map<std::string, int> to_id{{kNoRelation, 0}};

    static LabelSet from_instances(const std::vector<RelationInstance>& instances) {
        std::vector<std::string> rels;
        for (const auto& inst : instances)
            if (inst.relation != kNoRelation) rels.push_back(inst.relation);
        std::sort(rels.begin(), rels.end());
        rels.erase(std::unique(rels.begin(), rels.end()), rels.end());
        LabelSet ls;
        for (const auto& r : rels) {
            ls.to_id[r] = static_cast<int>(ls.labels.size());
            ls.labels.push_back(r);
        }
        return ls;
    }

    static LabelSet from_list(const std::vector<std::string>& names) {
        if (names.empty() || names[0] != kNoRelation)
            throw DataError("label list must start with no_relation");
        LabelSet ls;
        ls.labels = names;
        ls.to_id.clear();
        for (std::size_t i = 0; i < names.size(); ++i) ls.to_id[names[i]] = static_cast<int>(i);
        return ls;
    }

    int na_index() const { return 0; }
    int count() const { return static_cast<int>(labels.size()); }
    int id(const std::string& label) const {
        auto it = to_id.find(label);
        if (it == to_id.end()) throw DataError("unknown relation label: " + label);
        return it->second;
    }
};

// GloVe-format text embeddings: "token v1 ... vD" per line. Vocab misses are
// filled with Uniform(-0.01, 0.01); the padding row stays zero.
inline Tensor load_glove(const std::string& path, const Vocab& vocab, int dim, RngState& rng) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file " + path);
    Tensor table({static_cast<int>(vocab.size()), dim});
    std::vector<char> filled(vocab.size(), 0);
    filled[Vocab::kPad] = 1;  // stays zero
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        auto it = vocab.to_id.find(tok);
        std::vector<double> vals;
        vals.reserve(static_cast<std::size_t>(dim));
        double v;
        while (ss >> v) vals.push_back(v);
        if (!ss.eof())
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed value");
        if (static_cast<int>(vals.size()) != dim)
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(dim) + " values, got " + std::to_string(vals.size()));
        if (it == vocab.to_id.end() || it->second == Vocab::kPad) continue;
        std::copy(vals.begin(), vals.end(),
                  table.values().begin() + static_cast<std::size_t>(it->second) * dim);
        filled[static_cast<std::size_t>(it->second)] = 1;
    }
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (filled[i]) continue;
        for (int j = 0; j < dim; ++j) table.at(static_cast<int>(i), j) = rng.uniform(-0.01, 0.01);
    }
    return table;
}

// random-initialized table with a zero padding row, for runs without
// pretrained vectors
inline Tensor random_embedding_table(int rows, int dim, RngState& rng, double range = 0.1) {
    Tensor table({rows, dim});
    for (int i = 1; i < rows; ++i)
        for (int j = 0; j < dim; ++j) table.at(i, j) = rng.uniform(-range, range);
    return table;
}

// Padded id matrices for a mini-batch, all flattened row-major as
// [batch * max_len]. valid[i] is true exactly for positions < length.
struct Batch {
    int size = 0;     // instances
    int max_len = 0;  // padded length
    std::vector<int> word_ids, pos_ids, ner_ids;
    std::vector<char> valid;
    std::vector<int> lengths;
    std::vector<int> labels;
    std::vector<int> subj_start, subj_end, obj_start, obj_end;
};

inline Batch encode_batch(const std::vector<RelationInstance>& instances, const Vocab& vocab,
                          const Vocab& pos_vocab, const Vocab& ner_vocab, const LabelSet& labels,
                          int max_len_cap = 0) {
    if (instances.empty()) throw UsageError("encode_batch: empty instance list");
    Batch b;
    b.size = static_cast<int>(instances.size());
    for (const auto& inst : instances)
        b.max_len = std::max(b.max_len, static_cast<int>(inst.tokens.size()));
    if (max_len_cap > 0) b.max_len = std::min(b.max_len, max_len_cap);
    std::size_t total = static_cast<std::size_t>(b.size) * b.max_len;
    b.word_ids.assign(total, Vocab::kPad);
    b.pos_ids.assign(total, Vocab::kPad);
    b.ner_ids.assign(total, Vocab::kPad);
    b.valid.assign(total, 0);
    for (int i = 0; i < b.size; ++i) {
        const auto& inst = instances[static_cast<std::size_t>(i)];
        int n = std::min(static_cast<int>(inst.tokens.size()), b.max_len);
        b.lengths.push_back(n);
        b.labels.push_back(labels.id(inst.relation));
        // hard truncation keeps spans in range by clamping
        auto clamp = [&](int v) { return std::min(v, n - 1); };
        b.subj_start.push_back(clamp(inst.subj_start));
        b.subj_end.push_back(clamp(inst.subj_end));
        b.obj_start.push_back(clamp(inst.obj_start));
        b.obj_end.push_back(clamp(inst.obj_end));
        for (int t = 0; t < n; ++t) {
            std::size_t k = static_cast<std::size_t>(i) * b.max_len + t;
            b.word_ids[k] = vocab.id(inst.tokens[static_cast<std::size_t>(t)]);
            b.pos_ids[k] = pos_vocab.id(inst.pos_tags[static_cast<std::size_t>(t)]);
            b.ner_ids[k] = ner_vocab.id(inst.ner_tags[static_cast<std::size_t>(t)]);
            b.valid[k] = 1;
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// synthetic data

// Desk-scale stand-in for the licensed corpus. Each sentence carries a
// subject token, an object token and at most one cue token; the gold label is
// a function of the cue identity and of which side of the subject the cue
// sits on, so the task is unsolvable without positional information.
struct SynthConfig {
    int vocab_size = 40;    // filler token inventory
    int min_len = 5;
    int max_len = 12;
    int num_relations = 8;  // must be even: cue count * 2 sides
    int train_count = 10000;
    int dev_count = 1000;
    int test_count = 1000;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size < 1 || min_len < 4 || max_len < min_len || num_relations < 2 ||
            num_relations % 2 != 0 || train_count < 1 || dev_count < 1 || test_count < 1)
            throw ConfigError("invalid synthetic data configuration");
    }
};

struct SynthSplits {
    std::vector<RelationInstance> train, dev, test;
};

namespace detail {

inline std::vector<std::string> synth_label_names(int num_relations) {
    std::vector<std::string> names{LabelSet::kNoRelation};
    for (int k = 0; k < num_relations / 2; ++k) {
        names.push_back("rel:cue" + std::to_string(k) + ":left");
        names.push_back("rel:cue" + std::to_string(k) + ":right");
    }
    return names;
}

inline std::vector<RelationInstance> synth_split(const SynthConfig& cfg, int count,
                                                 const std::string& split_name, RngState& rng) {
    std::vector<std::string> names = synth_label_names(cfg.num_relations);
    // exact balance: cycle through labels, then shuffle
    std::vector<int> label_ids(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        label_ids[static_cast<std::size_t>(i)] = i % static_cast<int>(names.size());
    rng.shuffle(label_ids);

    std::vector<RelationInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int label = label_ids[static_cast<std::size_t>(i)];
        int n = rng.uniform_int(cfg.min_len, cfg.max_len);
        RelationInstance inst;
        inst.id = "synth-" + split_name + "-" + std::to_string(i);
        inst.relation = names[static_cast<std::size_t>(label)];
        inst.tokens.assign(static_cast<std::size_t>(n), "");
        inst.pos_tags.assign(static_cast<std::size_t>(n), "NN");
        inst.ner_tags.assign(static_cast<std::size_t>(n), "O");

        int subj_pos, cue_pos = -1;
        if (label == 0) {
            subj_pos = rng.uniform_int(0, n - 1);
        } else {
            int cue = (label - 1) / 2;
            bool right = (label - 1) % 2 == 1;
            // the cue sits a short distance from the subject and the subject
            // moves freely, so the cue's absolute position is nearly
            // uninformative about the side — only the relative offset decides
            int dist = rng.uniform_int(1, 3);
            subj_pos = right ? rng.uniform_int(0, n - 1 - dist) : rng.uniform_int(dist, n - 1);
            cue_pos = right ? subj_pos + dist : subj_pos - dist;
            inst.tokens[static_cast<std::size_t>(cue_pos)] = "cue" + std::to_string(cue);
            inst.pos_tags[static_cast<std::size_t>(cue_pos)] = "VB";
        }
        inst.tokens[static_cast<std::size_t>(subj_pos)] = "subjent";
        inst.pos_tags[static_cast<std::size_t>(subj_pos)] = "NNP";
        inst.ner_tags[static_cast<std::size_t>(subj_pos)] = "SUBJ";
        inst.subj_start = inst.subj_end = subj_pos;

        int obj_pos = subj_pos;
        while (obj_pos == subj_pos || obj_pos == cue_pos) obj_pos = rng.uniform_int(0, n - 1);
        inst.tokens[static_cast<std::size_t>(obj_pos)] = "objent";
        inst.pos_tags[static_cast<std::size_t>(obj_pos)] = "NNP";
        inst.ner_tags[static_cast<std::size_t>(obj_pos)] = "OBJ";
        inst.obj_start = inst.obj_end = obj_pos;

        for (int t = 0; t < n; ++t) {
            auto& tok = inst.tokens[static_cast<std::size_t>(t)];
            if (tok.empty()) tok = "w" + std::to_string(rng.uniform_int(0, cfg.vocab_size - 1));
        }
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace detail

inline SynthSplits generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    RngState rng(cfg.seed);
    SynthSplits splits;
    splits.train = detail::synth_split(cfg, cfg.train_count, "train", rng);
    splits.dev = detail::synth_split(cfg, cfg.dev_count, "dev", rng);
    splits.test = detail::synth_split(cfg, cfg.test_count, "test", rng);
    return splits;
}

}  // namespace relattn
