#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relattn/data.hpp"
#include "relattn/encoder.hpp"
#include "relattn/errors.hpp"
#include "relattn/ops.hpp"
#include "relattn/params.hpp"
#include "relattn/posattn.hpp"
#include "relattn/rng.hpp"

namespace relattn {

enum class InitScheme { kaiming, xavier };

struct ModelConfig {
    EncoderConfig encoder;
    int word_dim = 300;
    int tag_dim = 30;
    bool posattn = true;
    int d_p = 30;
    int d_a = 180;
    bool obj_pos_embedding = true;
    InitScheme init = InitScheme::kaiming;
    std::uint64_t seed = 1;
    bool finetune_embeddings = true;

    int d_model() const { return word_dim + 2 * tag_dim; }

    void validate() const {
        if (word_dim < 1 || tag_dim < 0 || d_p < 1 || d_a < 1)
            throw ConfigError("model dimensions must be positive");
        encoder.validate();
        if (encoder.d_model != d_model())
            throw ConfigError("encoder width " + std::to_string(encoder.d_model) +
                              " must equal word_dim + 2*tag_dim = " + std::to_string(d_model()));
    }
};

namespace detail {

inline void init_matrix(Tensor t, InitScheme scheme, RngState& rng) {
    int fan_in = t.rows(), fan_out = t.cols();
    if (scheme == InitScheme::kaiming) {
        double std = std::sqrt(2.0 / fan_in);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * std;
    } else {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    }
}

inline void fill_uniform(Tensor t, double range, RngState& rng, bool zero_first_row = false) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-range, range);
    if (zero_first_row && t.ndim() == 2)
        for (int j = 0; j < t.cols(); ++j) t.at(0, j) = 0.0;
}

inline void fill_ones(Tensor t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
}

}  // namespace detail

// Full model: input assembly -> self-attention encoder -> position-aware
// attention (or plain max-pool summary) -> fully-connected classifier.
class Model {
  public:
    Model(ModelConfig cfg, Vocab word_vocab, Vocab pos_vocab, Vocab ner_vocab, LabelSet labels,
          const Tensor* pretrained_words = nullptr)
        : cfg_(std::move(cfg)),
          word_vocab_(std::move(word_vocab)),
          pos_vocab_(std::move(pos_vocab)),
          ner_vocab_(std::move(ner_vocab)),
          labels_(std::move(labels)) {
        cfg_.validate();
        max_bin_ = max_bin_index(cfg_.encoder.l_max);
        build_params(pretrained_words);
        layer_states_.resize(static_cast<std::size_t>(cfg_.encoder.num_layers));
    }

    const ModelConfig& config() const { return cfg_; }
    const Vocab& word_vocab() const { return word_vocab_; }
    const Vocab& pos_vocab() const { return pos_vocab_; }
    const Vocab& ner_vocab() const { return ner_vocab_; }
    const LabelSet& labels() const { return labels_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::vector<EncoderLayerState>& layer_states() { return layer_states_; }
    int max_bin() const { return max_bin_; }

    // concat(word, ner, pos) embeddings plus the binned object-position
    // embedding, padding rows zeroed
    Tensor assemble_input(const Batch& batch) const {
        Tensor word = gather_rows(params_.get("embed.word"), batch.word_ids);
        Tensor ner = gather_rows(params_.get("embed.ner"), batch.ner_ids);
        Tensor pos = gather_rows(params_.get("embed.pos"), batch.pos_ids);
        Tensor e = concat_cols({word, ner, pos});
        if (cfg_.obj_pos_embedding)
            e = add(e, gather_rows(params_.get("embed.objpos"), object_bin_ids(batch)));
        if (cfg_.encoder.position_mode == PositionMode::absolute_sinusoidal)
            e = add(e, tiled_sinusoids(batch.size, batch.max_len, cfg_.d_model()));
        return mask_rows(e, batch.valid);
    }

    Tensor forward(const Batch& batch, bool training, RngState& rng, bool update_stats = true,
                   EncoderActivations* capture = nullptr) {
        Tensor h = assemble_input(batch);
        for (int l = 0; l < cfg_.encoder.num_layers; ++l)
            h = encoder_layer(h, layer_params(l), cfg_.encoder,
                              layer_states_[static_cast<std::size_t>(l)], batch.valid, batch.size,
                              batch.max_len, training, rng, update_stats,
                              l == 0 ? capture : nullptr);
        Tensor z;
        if (cfg_.posattn) {
            Tensor q_sum = summary(h, batch.valid, batch.size, batch.max_len);
            PosAttnParams pp{params_.get("posattn.P"),   params_.get("posattn.w_h"),
                             params_.get("posattn.w_q"), params_.get("posattn.w_s"),
                             params_.get("posattn.w_o"), params_.get("posattn.v")};
            Tensor a = attention_weights(h, q_sum, span_bin_ids(batch, true),
                                         span_bin_ids(batch, false), pp, batch.valid, batch.size,
                                         batch.max_len);
            z = sentence_representation(h, a, batch.size, batch.max_len);
        } else {
            z = summary(h, batch.valid, batch.size, batch.max_len);
        }
        z = dropout(z, cfg_.encoder.block_dropout, training, rng);
        return add_bias(matmul(z, params_.get("cls.w")), params_.get("cls.b"));
    }

    // argmax per row, ties to the lowest label index
    static std::vector<int> predict(const Tensor& logits) {
        std::vector<int> out(static_cast<std::size_t>(logits.rows()));
        for (int i = 0; i < logits.rows(); ++i) {
            int best = 0;
            for (int j = 1; j < logits.cols(); ++j)
                if (logits.at(i, j) > logits.at(i, best)) best = j;
            out[static_cast<std::size_t>(i)] = best;
        }
        return out;
    }

    // binned offsets to the subject (true) or object (false) span, one
    // embedding row id per flat position
    std::vector<int> span_bin_ids(const Batch& batch, bool subject) const {
        std::vector<int> ids(static_cast<std::size_t>(batch.size) * batch.max_len, max_bin_);
        for (int b = 0; b < batch.size; ++b) {
            int n = batch.lengths[static_cast<std::size_t>(b)];
            int s = subject ? batch.subj_start[static_cast<std::size_t>(b)]
                            : batch.obj_start[static_cast<std::size_t>(b)];
            int e = subject ? batch.subj_end[static_cast<std::size_t>(b)]
                            : batch.obj_end[static_cast<std::size_t>(b)];
            std::vector<int> binned = bin_positions(relative_position_vector(s, e, n));
            for (int t = 0; t < n; ++t)
                ids[static_cast<std::size_t>(b) * batch.max_len + t] =
                    bin_embedding_id(binned[static_cast<std::size_t>(t)], max_bin_);
        }
        return ids;
    }

    std::vector<int> object_bin_ids(const Batch& batch) const {
        return span_bin_ids(batch, false);
    }

    EncoderLayerParams layer_params(int l) const {
        EncoderLayerParams p;
        std::string base = "enc.l" + std::to_string(l) + ".";
        for (int h = 0; h < cfg_.encoder.num_heads; ++h) {
            std::string hb = base + "h" + std::to_string(h) + ".";
            AttentionHeadParams hp;
            hp.w_q = params_.get(hb + "wq");
            hp.w_k = params_.get(hb + "wk");
            hp.w_v = params_.get(hb + "wv");
            hp.w_r = params_.get(hb + "wr");
            hp.rel_table = params_.get(hb + "m");
            p.heads.push_back(std::move(hp));
        }
        p.proj_w = params_.get(base + "proj.w");
        p.proj_b = params_.get(base + "proj.b");
        p.ff_w1 = params_.get(base + "ff.w1");
        p.ff_b1 = params_.get(base + "ff.b1");
        p.ff_w2 = params_.get(base + "ff.w2");
        p.ff_b2 = params_.get(base + "ff.b2");
        p.norm1_gamma = params_.get(base + "norm1.gamma");
        p.norm1_beta = params_.get(base + "norm1.beta");
        if (cfg_.encoder.residual == ResidualKind::original_two) {
            p.norm2_gamma = params_.get(base + "norm2.gamma");
            p.norm2_beta = params_.get(base + "norm2.beta");
        }
        return p;
    }

  private:
    static Tensor tiled_sinusoids(int batch, int max_len, int d) {
        Tensor base = sinusoidal_encoding(max_len, d);
        Tensor out({batch * max_len, d});
        for (int b = 0; b < batch; ++b)
            std::copy_n(base.values().data(), base.size(),
                        out.values().data() + static_cast<std::size_t>(b) * base.size());
        return out;
    }

    void build_params(const Tensor* pretrained_words) {
        RngState rng(cfg_.seed);
        int d = cfg_.d_model();
        int d_h = cfg_.encoder.head_dim();
        int rel_rows = 2 * (cfg_.encoder.l_max - 1) + 1;

        Tensor word = params_.add("embed.word",
                                  {static_cast<int>(word_vocab_.size()), cfg_.word_dim});
        if (pretrained_words) {
            if (pretrained_words->shape() != word.shape())
                throw ConfigError("pretrained embedding shape mismatch");
            word.values() = pretrained_words->values();
        } else {
            detail::fill_uniform(word, 0.1, rng, /*zero_first_row=*/true);
        }
        if (!cfg_.finetune_embeddings) word.set_requires_grad(false);
        detail::fill_uniform(params_.add("embed.ner",
                                         {static_cast<int>(ner_vocab_.size()), cfg_.tag_dim}),
                             0.1, rng, true);
        detail::fill_uniform(params_.add("embed.pos",
                                         {static_cast<int>(pos_vocab_.size()), cfg_.tag_dim}),
                             0.1, rng, true);
        if (cfg_.obj_pos_embedding)
            params_.add("embed.objpos", {2 * max_bin_ + 1, d});  // starts at zero

        for (int l = 0; l < cfg_.encoder.num_layers; ++l) {
            std::string base = "enc.l" + std::to_string(l) + ".";
            for (int h = 0; h < cfg_.encoder.num_heads; ++h) {
                std::string hb = base + "h" + std::to_string(h) + ".";
                detail::init_matrix(params_.add(hb + "wq", {d, d_h}), cfg_.init, rng);
                detail::init_matrix(params_.add(hb + "wk", {d, d_h}), cfg_.init, rng);
                detail::init_matrix(params_.add(hb + "wv", {d, d_h}), cfg_.init, rng);
                detail::init_matrix(params_.add(hb + "wr", {d, d_h}), cfg_.init, rng);
                params_.add(hb + "m", {rel_rows, d_h});  // zero so relative == none at init
            }
            detail::init_matrix(params_.add(base + "proj.w", {d, d}), cfg_.init, rng);
            params_.add(base + "proj.b", {d});
            detail::init_matrix(params_.add(base + "ff.w1", {d, cfg_.encoder.ff_hidden}),
                                cfg_.init, rng);
            params_.add(base + "ff.b1", {cfg_.encoder.ff_hidden});
            detail::init_matrix(params_.add(base + "ff.w2", {cfg_.encoder.ff_hidden, d}),
                                cfg_.init, rng);
            params_.add(base + "ff.b2", {d});
            detail::fill_ones(params_.add(base + "norm1.gamma", {d}));
            params_.add(base + "norm1.beta", {d});
            if (cfg_.encoder.residual == ResidualKind::original_two) {
                detail::fill_ones(params_.add(base + "norm2.gamma", {d}));
                params_.add(base + "norm2.beta", {d});
            }
        }

        if (cfg_.posattn) {
            detail::fill_uniform(params_.add("posattn.P", {2 * max_bin_ + 1, cfg_.d_p}), 0.1,
                                 rng);
            detail::init_matrix(params_.add("posattn.w_h", {d, cfg_.d_a}), cfg_.init, rng);
            detail::init_matrix(params_.add("posattn.w_q", {d, cfg_.d_a}), cfg_.init, rng);
            detail::init_matrix(params_.add("posattn.w_s", {cfg_.d_p, cfg_.d_a}), cfg_.init, rng);
            detail::init_matrix(params_.add("posattn.w_o", {cfg_.d_p, cfg_.d_a}), cfg_.init, rng);
            detail::init_matrix(params_.add("posattn.v", {cfg_.d_a, 1}), cfg_.init, rng);
        }

        detail::init_matrix(params_.add("cls.w", {d, labels_.count()}), cfg_.init, rng);
        params_.add("cls.b", {labels_.count()});
    }

    ModelConfig cfg_;
    Vocab word_vocab_, pos_vocab_, ner_vocab_;
    LabelSet labels_;
    ParamStore params_;
    std::vector<EncoderLayerState> layer_states_;
    int max_bin_ = 0;
};

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace detail {

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
    return {{"d_model", c.d_model},
            {"num_heads", c.num_heads},
            {"num_layers", c.num_layers},
            {"ff_hidden", c.ff_hidden},
            {"position_mode", static_cast<int>(c.position_mode)},
            {"norm", static_cast<int>(c.norm)},
            {"residual", static_cast<int>(c.residual)},
            {"activation", static_cast<int>(c.activation)},
            {"attn_dropout", c.attn_dropout},
            {"block_dropout", c.block_dropout},
            {"scale_scores", c.scale_scores},
            {"l_max", c.l_max},
            {"rrelu_lower", c.rrelu_lower},
            {"rrelu_upper", c.rrelu_upper},
            {"norm_eps", c.norm_eps},
            {"bn_momentum", c.bn_momentum}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_model = j.at("d_model");
    c.num_heads = j.at("num_heads");
    c.num_layers = j.at("num_layers");
    c.ff_hidden = j.at("ff_hidden");
    c.position_mode = static_cast<PositionMode>(j.at("position_mode").get<int>());
    c.norm = static_cast<NormKind>(j.at("norm").get<int>());
    c.residual = static_cast<ResidualKind>(j.at("residual").get<int>());
    c.activation = static_cast<Activation>(j.at("activation").get<int>());
    c.attn_dropout = j.at("attn_dropout");
    c.block_dropout = j.at("block_dropout");
    c.scale_scores = j.at("scale_scores");
    c.l_max = j.at("l_max");
    c.rrelu_lower = j.at("rrelu_lower");
    c.rrelu_upper = j.at("rrelu_upper");
    c.norm_eps = j.at("norm_eps");
    c.bn_momentum = j.at("bn_momentum");
    return c;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"encoder", encoder_config_to_json(c.encoder)},
            {"word_dim", c.word_dim},
            {"tag_dim", c.tag_dim},
            {"posattn", c.posattn},
            {"d_p", c.d_p},
            {"d_a", c.d_a},
            {"obj_pos_embedding", c.obj_pos_embedding},
            {"init", static_cast<int>(c.init)},
            {"seed", c.seed},
            {"finetune_embeddings", c.finetune_embeddings}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.encoder = encoder_config_from_json(j.at("encoder"));
    c.word_dim = j.at("word_dim");
    c.tag_dim = j.at("tag_dim");
    c.posattn = j.at("posattn");
    c.d_p = j.at("d_p");
    c.d_a = j.at("d_a");
    c.obj_pos_embedding = j.at("obj_pos_embedding");
    c.init = static_cast<InitScheme>(j.at("init").get<int>());
    c.seed = j.at("seed");
    c.finetune_embeddings = j.at("finetune_embeddings");
    return c;
}

}  // namespace detail

// Versioned container: magic + JSON header (config, vocabularies, parameter
// layout) followed by raw little-endian float64 payloads in header order.
// Round-trips byte-exactly.
inline void save_checkpoint(Model& model, const std::string& path) {
    nlohmann::json header;
    header["format"] = "relattn-checkpoint";
    header["version"] = 1;
    header["config"] = detail::model_config_to_json(model.config());
    header["word_vocab"] = model.word_vocab().tokens;
    header["pos_vocab"] = model.pos_vocab().tokens;
    header["ner_vocab"] = model.ner_vocab().tokens;
    header["labels"] = model.labels().labels;
    nlohmann::json plist = nlohmann::json::array();
    for (std::size_t i = 0; i < model.params().count(); ++i) {
        plist.push_back({{"name", model.params().name(i)},
                         {"shape", model.params().tensor(i).shape()}});
    }
    header["params"] = plist;
    header["num_layer_states"] = model.layer_states().size();
    header["channels"] = model.config().d_model();

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    const char magic[8] = {'R', 'E', 'L', 'A', 'T', 'T', 'N', '1'};
    out.write(magic, 8);
    std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (std::size_t i = 0; i < model.params().count(); ++i) {
        const auto& vals = model.params().tensor(i).values();
        out.write(reinterpret_cast<const char*>(vals.data()),
                  static_cast<std::streamsize>(vals.size() * sizeof(double)));
    }
    int d = model.config().d_model();
    for (auto& st : model.layer_states()) {
        for (BnState* bn : {&st.norm1, &st.norm2}) {
            if (!bn->initialized) bn->init(d);
            out.write(reinterpret_cast<const char*>(bn->running_mean.data()),
                      static_cast<std::streamsize>(bn->running_mean.size() * sizeof(double)));
            out.write(reinterpret_cast<const char*>(bn->running_var.data()),
                      static_cast<std::streamsize>(bn->running_var.size() * sizeof(double)));
        }
    }
    if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "RELATTN1")
        throw DataError(path + ": not a relattn checkpoint");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError(path + ": truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": corrupt checkpoint header: " + e.what());
    }
    if (header.value("version", 0) != 1)
        throw DataError(path + ": unsupported checkpoint version");

    ModelConfig cfg = detail::model_config_from_json(header.at("config"));
    auto rebuild_vocab = [](const std::vector<std::string>& tokens) {
        Vocab v;
        v.tokens = tokens;
        v.to_id.clear();
        for (std::size_t i = 0; i < tokens.size(); ++i) v.to_id[tokens[i]] = static_cast<int>(i);
        return v;
    };
    Vocab wv = rebuild_vocab(header.at("word_vocab").get<std::vector<std::string>>());
    Vocab pv = rebuild_vocab(header.at("pos_vocab").get<std::vector<std::string>>());
    Vocab nv = rebuild_vocab(header.at("ner_vocab").get<std::vector<std::string>>());
    LabelSet ls = LabelSet::from_list(header.at("labels").get<std::vector<std::string>>());

    Model model(cfg, std::move(wv), std::move(pv), std::move(nv), std::move(ls));
    const auto& plist = header.at("params");
    if (plist.size() != model.params().count())
        throw DataError(path + ": parameter layout mismatch");
    for (std::size_t i = 0; i < model.params().count(); ++i) {
        if (plist[i].at("name") != model.params().name(i) ||
            plist[i].at("shape").get<std::vector<int>>() != model.params().tensor(i).shape())
            throw DataError(path + ": parameter layout mismatch at " + model.params().name(i));
        auto& vals = model.params().tensor(i).values();
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(double)));
    }
    int d = cfg.d_model();
    for (auto& st : model.layer_states()) {
        for (BnState* bn : {&st.norm1, &st.norm2}) {
            bn->init(d);
            in.read(reinterpret_cast<char*>(bn->running_mean.data()),
                    static_cast<std::streamsize>(static_cast<std::size_t>(d) * sizeof(double)));
            in.read(reinterpret_cast<char*>(bn->running_var.data()),
                    static_cast<std::streamsize>(static_cast<std::size_t>(d) * sizeof(double)));
        }
    }
    if (!in) throw DataError(path + ": truncated checkpoint payload");
    return model;
}

}  // namespace relattn
