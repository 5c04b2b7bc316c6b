#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "relattn/errors.hpp"
#include "relattn/ops.hpp"
#include "relattn/rng.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

enum class PositionMode { relative, absolute_sinusoidal, none };
enum class NormKind { batch, layer };
enum class ResidualKind { single_span, original_two };
enum class Activation { rrelu, relu };

struct EncoderConfig {
    int d_model = 360;
    int num_heads = 3;
    int num_layers = 1;
    int ff_hidden = 130;
    PositionMode position_mode = PositionMode::relative;
    NormKind norm = NormKind::batch;
    ResidualKind residual = ResidualKind::single_span;
    Activation activation = Activation::rrelu;
    double attn_dropout = 0.1;
    double block_dropout = 0.4;
    bool scale_scores = true;
    int l_max = 100;
    double rrelu_lower = 0.125;
    double rrelu_upper = 1.0 / 3.0;
    double norm_eps = 1e-5;
    double bn_momentum = 0.1;

    int head_dim() const {
        if (num_heads < 1 || d_model % num_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
        return d_model / num_heads;
    }

    void validate() const {
        head_dim();
        if (num_layers < 1 || ff_hidden < 1 || l_max < 1)
            throw ConfigError("encoder dimensions must be positive");
        if (attn_dropout < 0 || attn_dropout >= 1 || block_dropout < 0 || block_dropout >= 1)
            throw ConfigError("dropout rates must be in [0, 1)");
        if (!(rrelu_lower > 0 && rrelu_lower <= rrelu_upper && rrelu_upper < 1))
            throw ConfigError("rrelu bounds must satisfy 0 < lower <= upper < 1");
    }
};

struct AttentionHeadParams {
    Tensor w_q, w_k, w_v, w_r;  // each [d_model x d_h]
    Tensor rel_table;           // [(2*(l_max-1)+1) x d_h], row l_max-1 holds m_0
};

struct EncoderLayerParams {
    std::vector<AttentionHeadParams> heads;
    Tensor proj_w, proj_b;          // output projection [d_model x d_model], [d_model]
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    Tensor norm1_gamma, norm1_beta;
    Tensor norm2_gamma, norm2_beta;  // only used by the two-residual variant
};

struct EncoderLayerState {
    BnState norm1, norm2;
};

// per-head score breakdown captured for inspection in tests
struct EncoderActivations {
    // [head][instance] score matrices (values only)
    std::vector<std::vector<std::vector<double>>> z_pair;
    std::vector<std::vector<std::vector<double>>> z_relpos;
};

// standard interleaved sin/cos over geometric wavelengths
inline Tensor sinusoidal_encoding(int n, int d) {
    if (d % 2 != 0) throw ConfigError("sinusoidal encoding requires an even width");
    Tensor out({n, d});
    for (int pos = 0; pos < n; ++pos)
        for (int k = 0; k < d / 2; ++k) {
            double freq = std::pow(10000.0, -2.0 * k / d);
            out.at(pos, 2 * k) = std::sin(pos * freq);
            out.at(pos, 2 * k + 1) = std::cos(pos * freq);
        }
    return out;
}

// M_i as defined for query position i (1-based): columns m_{1-i} ... m_{n-i},
// shaped [d_h x n]. The table row (offset + l_max - 1) holds m_offset.
inline Tensor build_relpos_matrix(int i, int n, const Tensor& table) {
    int rows = table.rows(), d = table.cols();
    int center = (rows - 1) / 2;
    if (i < 1 || i > n) throw UsageError("build_relpos_matrix: need 1 <= i <= n");
    if (n - 1 > center)
        throw DimensionError("sequence length " + std::to_string(n) +
                             " exceeds the relative-position table range " +
                             std::to_string(center + 1));
    Tensor m({d, n});
    for (int j = 1; j <= n; ++j) {
        int offset = j - i;
        for (int p = 0; p < d; ++p) m.at(p, j - 1) = table.at(offset + center, p);
    }
    return m;
}

namespace detail {

inline Tensor apply_activation(const Tensor& x, const EncoderConfig& cfg, bool training,
                               RngState& rng) {
    if (cfg.activation == Activation::relu) return relu(x);
    return rrelu(x, cfg.rrelu_lower, cfg.rrelu_upper, training, rng);
}

inline Tensor feed_forward(const Tensor& x, const EncoderLayerParams& p, const EncoderConfig& cfg,
                           bool training, RngState& rng) {
    Tensor hidden = apply_activation(add_bias(matmul(x, p.ff_w1), p.ff_b1), cfg, training, rng);
    return add_bias(matmul(hidden, p.ff_w2), p.ff_b2);
}

inline Tensor apply_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const std::vector<char>& valid, BnState& state, const EncoderConfig& cfg,
                         bool training, bool update_stats) {
    if (cfg.norm == NormKind::batch)
        return batch_norm(x, gamma, beta, valid, state, cfg.bn_momentum, cfg.norm_eps, training,
                          update_stats);
    return mask_rows(layer_norm(x, gamma, beta, cfg.norm_eps), valid);
}

}  // namespace detail

// Multi-head self-attention over a padded batch laid out as [(B*L) x d_model].
// Scores are z_pair + z_relpos (z_relpos only in relative mode), optionally
// scaled by 1/sqrt(d_h); padding keys get -1e30 before the softmax and
// padding query rows are zeroed afterwards.
inline Tensor multi_head_attention(const Tensor& e, const EncoderLayerParams& p,
                                   const EncoderConfig& cfg, const std::vector<char>& valid,
                                   int batch, int max_len, bool training, RngState& rng,
                                   EncoderActivations* capture = nullptr) {
    int d_h = cfg.head_dim();
    double score_scale = cfg.scale_scores ? 1.0 / std::sqrt(static_cast<double>(d_h)) : 1.0;
    if (max_len > cfg.l_max)
        throw DimensionError("sequence length " + std::to_string(max_len) +
                             " exceeds l_max " + std::to_string(cfg.l_max));

    // per-instance single-valid-position check happens via the additive mask;
    // a fully masked instance is a caller error surfaced in encoder_forward
    std::vector<Tensor> key_masks(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        Tensor m({max_len, max_len});
        bool any = false;
        for (int j = 0; j < max_len; ++j) {
            bool ok = valid[static_cast<std::size_t>(b) * max_len + j];
            any = any || ok;
            if (!ok)
                for (int i = 0; i < max_len; ++i) m.at(i, j) = -1e30;
        }
        if (!any)
            throw DegenerateInputError("attention: instance " + std::to_string(b) +
                                       " is fully masked");
        key_masks[static_cast<std::size_t>(b)] = m;
    }

    if (capture) {
        capture->z_pair.assign(static_cast<std::size_t>(cfg.num_heads), {});
        capture->z_relpos.assign(static_cast<std::size_t>(cfg.num_heads), {});
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
        const AttentionHeadParams& hp = p.heads[static_cast<std::size_t>(h)];
        Tensor q = matmul(e, hp.w_q);
        Tensor k = matmul(e, hp.w_k);
        Tensor v = matmul(e, hp.w_v);
        Tensor r;
        if (cfg.position_mode == PositionMode::relative) r = matmul(e, hp.w_r);

        std::vector<Tensor> per_instance;
        per_instance.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            int row0 = b * max_len;
            Tensor qb = slice_rows(q, row0, max_len);
            Tensor kb = slice_rows(k, row0, max_len);
            Tensor vb = slice_rows(v, row0, max_len);
            Tensor scores = matmul_nt(qb, kb);
            if (capture)
                capture->z_pair[static_cast<std::size_t>(h)].push_back(scores.values());
            if (cfg.position_mode == PositionMode::relative) {
                Tensor rb = slice_rows(r, row0, max_len);
                Tensor zr = relpos_scores(rb, hp.rel_table, max_len);
                if (capture)
                    capture->z_relpos[static_cast<std::size_t>(h)].push_back(zr.values());
                scores = add(scores, zr);
            }
            if (cfg.scale_scores) scores = scale(scores, score_scale);
            scores = add(scores, key_masks[static_cast<std::size_t>(b)]);
            Tensor weights = dropout(softmax_rows(scores), cfg.attn_dropout, training, rng);
            per_instance.push_back(matmul(weights, vb));
        }
        head_outputs.push_back(vstack(per_instance));
    }
    Tensor concat = cfg.num_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return add_bias(matmul(concat, p.proj_w), p.proj_b);
}

// One encoder layer over a padded batch. single_span:
//   out = Norm(e + Drop(FF(Drop(Attn(e)))))
// original_two:
//   x = Norm1(e + Drop(Attn(e))); out = Norm2(x + Drop(FF(x)))
// Padding rows are zero on output either way.
inline Tensor encoder_layer(const Tensor& e, const EncoderLayerParams& p, const EncoderConfig& cfg,
                            EncoderLayerState& state, const std::vector<char>& valid, int batch,
                            int max_len, bool training, RngState& rng, bool update_stats = true,
                            EncoderActivations* capture = nullptr) {
    Tensor attn = dropout(
        multi_head_attention(e, p, cfg, valid, batch, max_len, training, rng, capture),
        cfg.block_dropout, training, rng);
    if (cfg.residual == ResidualKind::single_span) {
        Tensor ff = dropout(detail::feed_forward(attn, p, cfg, training, rng), cfg.block_dropout,
                            training, rng);
        return detail::apply_norm(add(e, ff), p.norm1_gamma, p.norm1_beta, valid, state.norm1,
                                  cfg, training, update_stats);
    }
    Tensor x = detail::apply_norm(add(e, attn), p.norm1_gamma, p.norm1_beta, valid, state.norm1,
                                  cfg, training, update_stats);
    Tensor ff = dropout(detail::feed_forward(x, p, cfg, training, rng), cfg.block_dropout,
                        training, rng);
    return detail::apply_norm(add(x, ff), p.norm2_gamma, p.norm2_beta, valid, state.norm2, cfg,
                              training, update_stats);
}

// max-pooled summary over valid positions, [B x d_model]
inline Tensor summary(const Tensor& h, const std::vector<char>& valid, int batch, int max_len) {
    return max_pool_segments(h, batch, max_len, valid);
}

// ---------------------------------------------------------------------------
// single-instance conveniences (tests and small-scale inspection)

inline Tensor attention_head(const Tensor& e, const AttentionHeadParams& hp,
                             const EncoderConfig& cfg, const std::vector<char>& valid,
                             bool training, RngState& rng) {
    int n = e.rows();
    int d_h = cfg.head_dim();
    double score_scale = cfg.scale_scores ? 1.0 / std::sqrt(static_cast<double>(d_h)) : 1.0;
    bool any = false;
    Tensor key_mask({n, n});
    for (int j = 0; j < n; ++j) {
        bool ok = valid[static_cast<std::size_t>(j)];
        any = any || ok;
        if (!ok)
            for (int i = 0; i < n; ++i) key_mask.at(i, j) = -1e30;
    }
    if (!any) throw DegenerateInputError("attention_head: all positions masked");

    Tensor q = matmul(e, hp.w_q);
    Tensor k = matmul(e, hp.w_k);
    Tensor v = matmul(e, hp.w_v);
    Tensor scores = matmul_nt(q, k);
    if (cfg.position_mode == PositionMode::relative) {
        Tensor r = matmul(e, hp.w_r);
        scores = add(scores, relpos_scores(r, hp.rel_table, n));
    }
    if (cfg.scale_scores) scores = scale(scores, score_scale);
    scores = add(scores, key_mask);
    Tensor weights = dropout(softmax_rows(scores), cfg.attn_dropout, training, rng);
    return matmul(weights, v);
}

inline Tensor multi_head(const Tensor& e, const EncoderLayerParams& p, const EncoderConfig& cfg,
                         const std::vector<char>& valid, bool training, RngState& rng) {
    return multi_head_attention(e, p, cfg, valid, 1, e.rows(), training, rng);
}

}  // namespace relattn
