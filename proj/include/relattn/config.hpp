#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "relattn/data.hpp"
#include "relattn/errors.hpp"
#include "relattn/model.hpp"
#include "relattn/train.hpp"

namespace relattn {

// Everything a run needs: model + training hyperparameters, data locations
// (either TACRED-schema JSON files or the built-in synthetic generator), and
// the output directory. Serialized as a flat key=value file; every key has a
// default and unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    std::string data_source = "files";  // "files" | "synth"
    std::string train_path, dev_path, test_path;
    std::string glove_path;  // empty: random word embeddings
    std::string out_dir = "out";
    int vocab_min_count = 1;

    SynthConfig synth;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        int r = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        unsigned long long r = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(r);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

}  // namespace detail

inline void apply_config_kv(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    using detail::parse_u64;
    EncoderConfig& e = c.model.encoder;

    if (key == "word_dim") c.model.word_dim = parse_int(key, value);
    else if (key == "tag_dim") c.model.tag_dim = parse_int(key, value);
    else if (key == "posattn") c.model.posattn = parse_bool(key, value);
    else if (key == "d_p") c.model.d_p = parse_int(key, value);
    else if (key == "d_a") c.model.d_a = parse_int(key, value);
    else if (key == "obj_pos_embedding") c.model.obj_pos_embedding = parse_bool(key, value);
    else if (key == "finetune_embeddings") c.model.finetune_embeddings = parse_bool(key, value);
    else if (key == "seed") {
        c.model.seed = parse_u64(key, value);
        c.train.seed = c.model.seed;
    } else if (key == "init") {
        if (value == "kaiming") c.model.init = InitScheme::kaiming;
        else if (value == "xavier") c.model.init = InitScheme::xavier;
        else throw ConfigError("init: expected kaiming or xavier, got '" + value + "'");
    } else if (key == "num_heads") e.num_heads = parse_int(key, value);
    else if (key == "num_layers") e.num_layers = parse_int(key, value);
    else if (key == "ff_hidden") e.ff_hidden = parse_int(key, value);
    else if (key == "position_mode") {
        if (value == "relative") e.position_mode = PositionMode::relative;
        else if (value == "absolute") e.position_mode = PositionMode::absolute_sinusoidal;
        else if (value == "none") e.position_mode = PositionMode::none;
        else throw ConfigError("position_mode: expected relative, absolute or none, got '" +
                               value + "'");
    } else if (key == "norm") {
        if (value == "batch") e.norm = NormKind::batch;
        else if (value == "layer") e.norm = NormKind::layer;
        else throw ConfigError("norm: expected batch or layer, got '" + value + "'");
    } else if (key == "residual") {
        if (value == "single") e.residual = ResidualKind::single_span;
        else if (value == "two") e.residual = ResidualKind::original_two;
        else throw ConfigError("residual: expected single or two, got '" + value + "'");
    } else if (key == "activation") {
        if (value == "rrelu") e.activation = Activation::rrelu;
        else if (value == "relu") e.activation = Activation::relu;
        else throw ConfigError("activation: expected rrelu or relu, got '" + value + "'");
    } else if (key == "attn_dropout") e.attn_dropout = parse_double(key, value);
    else if (key == "block_dropout") e.block_dropout = parse_double(key, value);
    else if (key == "scale_scores") e.scale_scores = parse_bool(key, value);
    else if (key == "l_max") e.l_max = parse_int(key, value);
    else if (key == "rrelu_lower") e.rrelu_lower = parse_double(key, value);
    else if (key == "rrelu_upper") e.rrelu_upper = parse_double(key, value);
    else if (key == "norm_eps") e.norm_eps = parse_double(key, value);
    else if (key == "bn_momentum") e.bn_momentum = parse_double(key, value);

    else if (key == "lr0") c.train.lr0 = parse_double(key, value);
    else if (key == "decay") c.train.decay = parse_double(key, value);
    else if (key == "patience") c.train.patience = parse_int(key, value);
    else if (key == "decay_start_epoch") c.train.decay_start_epoch = parse_int(key, value);
    else if (key == "epochs") c.train.epochs = parse_int(key, value);
    else if (key == "batch_size") c.train.batch_size = parse_int(key, value);
    else if (key == "grad_clip") c.train.grad_clip = parse_double(key, value);
    else if (key == "weight_decay") c.train.weight_decay = parse_double(key, value);

    else if (key == "data_source") {
        if (value != "files" && value != "synth")
            throw ConfigError("data_source: expected files or synth, got '" + value + "'");
        c.data_source = value;
    } else if (key == "train_path") c.train_path = value;
    else if (key == "dev_path") c.dev_path = value;
    else if (key == "test_path") c.test_path = value;
    else if (key == "glove_path") c.glove_path = value;
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "vocab_min_count") c.vocab_min_count = parse_int(key, value);

    else if (key == "synth_vocab_size") c.synth.vocab_size = parse_int(key, value);
    else if (key == "synth_min_len") c.synth.min_len = parse_int(key, value);
    else if (key == "synth_max_len") c.synth.max_len = parse_int(key, value);
    else if (key == "synth_relations") c.synth.num_relations = parse_int(key, value);
    else if (key == "synth_train") c.synth.train_count = parse_int(key, value);
    else if (key == "synth_dev") c.synth.dev_count = parse_int(key, value);
    else if (key == "synth_test") c.synth.test_count = parse_int(key, value);
    else if (key == "synth_seed") c.synth.seed = parse_u64(key, value);

    else
        throw ConfigError("unknown configuration key '" + key + "'");
}

// d_model is derived, never set directly
inline void finalize_config(RunConfig& c) {
    c.model.encoder.d_model = c.model.d_model();
    c.model.validate();
    c.train.validate();
}

inline std::pair<std::string, std::string> split_kv(const std::string& line,
                                                    const std::string& context) {
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError(context + ": expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t");
        std::size_t b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(context + ": empty key in '" + line + "'");
    return {key, value};
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
    RunConfig c;
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        std::size_t b = line.find_last_not_of(" \t\r");
        auto [key, value] = split_kv(line.substr(a, b - a + 1),
                                     path + ":" + std::to_string(lineno));
        apply_config_kv(c, key, value);
    }
    for (const std::string& ov : overrides) {
        auto [key, value] = split_kv(ov, "override");
        apply_config_kv(c, key, value);
    }
    finalize_config(c);
    return c;
}

}  // namespace relattn
