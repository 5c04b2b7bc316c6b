#pragma once

#include <cmath>
#include <cstdlib>
#include <vector>

#include "relattn/errors.hpp"
#include "relattn/ops.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

// Signed offset of each token to the nearest edge of the span: 0 inside the
// span, i - start left of it, i - end right of it.
inline std::vector<int> relative_position_vector(int start, int end, int n) {
    if (start < 0 || end < start || end >= n)
        throw DataError("span (" + std::to_string(start) + ", " + std::to_string(end) +
                        ") outside sentence of length " + std::to_string(n));
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (i < start)
            p[static_cast<std::size_t>(i)] = i - start;
        else if (i > end)
            p[static_cast<std::size_t>(i)] = i - end;
        else
            p[static_cast<std::size_t>(i)] = 0;
    }
    return p;
}

// Growing-width distance bins: widths 1, 1, 2, 3, 4, ... so bin k covers
// (T_{k-1}, T_k] with T_k = (k^2 - k + 2) / 2. Identity for |d| <= 2,
// sign-preserving, bin(0) = 0.
struct BinConfig {
    bool enabled = true;
    // optional explicit widths for the leading bins; the default growth rule
    // continues past the end of the list
    std::vector<int> widths;

    int bin_of_distance(int d) const {
        if (d < 0) throw UsageError("bin_of_distance expects d >= 0");
        if (!enabled) return d;
        if (d == 0) return 0;
        int k = 0;
        long upper = 0;
        while (upper < d) {
            ++k;
            upper += width(k);
        }
        return k;
    }

    int width(int k) const {
        if (k <= 0) return 0;
        if (k - 1 < static_cast<int>(widths.size()))
            return widths[static_cast<std::size_t>(k - 1)];
        if (!widths.empty()) {
            // continue growing by one past an explicit prefix
            int last = widths.back();
            return last + (k - static_cast<int>(widths.size()));
        }
        return k <= 2 ? 1 : k - 1;
    }

    int bin(int d) const {
        if (!enabled) return d;
        int s = d < 0 ? -1 : 1;
        return s * bin_of_distance(std::abs(d));
    }
};

inline std::vector<int> bin_positions(const std::vector<int>& p, const BinConfig& cfg = {}) {
    std::vector<int> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = cfg.bin(p[i]);
    return out;
}

// largest bin index reachable for sentences up to max_len tokens
inline int max_bin_index(int max_len, const BinConfig& cfg = {}) {
    return cfg.bin(max_len > 0 ? max_len - 1 : 0);
}

// embedding row for a (possibly out-of-range) binned offset, clamped to the
// largest configured bin
inline int bin_embedding_id(int binned, int max_bin) {
    if (binned > max_bin) binned = max_bin;
    if (binned < -max_bin) binned = -max_bin;
    return binned + max_bin;
}

struct PosAttnParams {
    Tensor P;    // shared position-embedding table [(2*max_bin+1) x d_p]
    Tensor w_h;  // [d_model x d_a]
    Tensor w_q;  // [d_model x d_a]
    Tensor w_s;  // [d_p x d_a]
    Tensor w_o;  // [d_p x d_a]
    Tensor v;    // [d_a x 1]
};

// u_i = v^T tanh(W_h h_i + W_q q + W_s p^s_i + W_o p^o_i), a = softmax(u)
// over valid positions. Batched: h is [(B*L) x d_model], q_sum [B x d_model],
// ps_ids/po_ids are embedding rows per flat position. Returns a as [B x L].
inline Tensor attention_weights(const Tensor& h, const Tensor& q_sum,
                                const std::vector<int>& ps_ids, const std::vector<int>& po_ids,
                                const PosAttnParams& params, const std::vector<char>& valid,
                                int batch, int max_len) {
    int flat = batch * max_len;
    if (h.rows() != flat || static_cast<int>(valid.size()) != flat ||
        static_cast<int>(ps_ids.size()) != flat || static_cast<int>(po_ids.size()) != flat)
        throw DimensionError("attention_weights: inconsistent batch layout");
    bool any = false;
    for (int b = 0; b < batch; ++b) {
        bool row_ok = false;
        for (int t = 0; t < max_len; ++t)
            row_ok = row_ok || valid[static_cast<std::size_t>(b) * max_len + t];
        if (!row_ok)
            throw DegenerateInputError("attention_weights: instance " + std::to_string(b) +
                                       " has no valid positions");
        any = true;
    }
    (void)any;

    Tensor hw = matmul(h, params.w_h);
    // broadcast the per-instance summary over its positions
    std::vector<int> rep(static_cast<std::size_t>(flat));
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t < max_len; ++t) rep[static_cast<std::size_t>(b) * max_len + t] = b;
    Tensor qw = gather_rows(matmul(q_sum, params.w_q), rep);
    Tensor sw = matmul(gather_rows(params.P, ps_ids), params.w_s);
    Tensor ow = matmul(gather_rows(params.P, po_ids), params.w_o);
    Tensor u = matmul(tanh_op(add(add(hw, qw), add(sw, ow))), params.v);  // [flat x 1]

    // additive mask before the per-instance softmax
    Tensor mask({batch, max_len});
    for (int i = 0; i < flat; ++i)
        mask[static_cast<std::size_t>(i)] = valid[static_cast<std::size_t>(i)] ? 0.0 : -1e30;
    return softmax_rows(add(reshape(u, {batch, max_len}), mask));
}

// z_b = sum_i a_{b,i} h_{b,i}
inline Tensor sentence_representation(const Tensor& h, const Tensor& a, int batch, int max_len) {
    if (h.rows() != batch * max_len || a.rows() != batch || a.cols() != max_len)
        throw DimensionError("sentence_representation: inconsistent shapes");
    Tensor weighted = mul_rowscale(h, reshape(a, {batch * max_len}));
    return segment_sum_rows(weighted, batch, max_len);
}

// single-instance conveniences used by tests
inline Tensor attention_weights_single(const Tensor& h, const Tensor& q_sum,
                                       const std::vector<int>& ps_ids,
                                       const std::vector<int>& po_ids,
                                       const PosAttnParams& params) {
    int n = h.rows();
    return attention_weights(h, q_sum, ps_ids, po_ids, params, std::vector<char>(n, 1), 1, n);
}

inline Tensor sentence_representation_single(const Tensor& h, const Tensor& a) {
    return sentence_representation(h, a, 1, h.rows());
}

}  // namespace relattn
