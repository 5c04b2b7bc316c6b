#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "relattn/errors.hpp"
#include "relattn/rng.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

namespace detail {

inline bool any_rg(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(std::vector<int> shape, std::initializer_list<const Tensor*> ins) {
    bool rg = recording() && any_rg(ins);
    return Tensor(std::move(shape), rg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul family

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + a.shape_str() + " vs " +
                             b.shape_str());
    Tensor out = detail::make_output({m, n}, {&a, &b});
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = out.values().data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double aip = A[static_cast<std::size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const double* Bp = B + static_cast<std::size_t>(p) * n;
            double* Ci = C + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([ad = a.data(), bd = b.data(), od = out.data(), m, k, n] {
            const double* G = od->grad.data();
            if (ad->requires_grad) {
                ad->ensure_grad();
                // dA += G * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* Gi = G + static_cast<std::size_t>(i) * n;
                        const double* Bp = bd->values.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) s += Gi[j] * Bp[j];
                        ad->grad[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                // dB += A^T * G
                for (int i = 0; i < m; ++i) {
                    const double* Ai = ad->values.data() + static_cast<std::size_t>(i) * k;
                    const double* Gi = G + static_cast<std::size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        double aip = Ai[p];
                        if (aip == 0.0) continue;
                        double* dBp = bd->grad.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
                    }
                }
            }
        });
    }
    return out;
}

// a * b^T ; b is [n x k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    int m = a.rows(), k = a.cols(), n = b.rows();
    if (k != b.cols())
        throw DimensionError("matmul_nt: inner dimensions disagree, " + a.shape_str() + " vs " +
                             b.shape_str());
    Tensor out = detail::make_output({m, n}, {&a, &b});
    for (int i = 0; i < m; ++i) {
        const double* Ai = a.values().data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const double* Bj = b.values().data() + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += Ai[p] * Bj[p];
            out.at(i, j) = s;
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([ad = a.data(), bd = b.data(), od = out.data(), m, k, n] {
            const double* G = od->grad.data();
            if (ad->requires_grad) {
                ad->ensure_grad();
                // dA += G * B
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double g = G[static_cast<std::size_t>(i) * n + j];
                        if (g == 0.0) continue;
                        const double* Bj = bd->values.data() + static_cast<std::size_t>(j) * k;
                        double* dAi = ad->grad.data() + static_cast<std::size_t>(i) * k;
                        for (int p = 0; p < k; ++p) dAi[p] += g * Bj[p];
                    }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                // dB += G^T * A
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double g = G[static_cast<std::size_t>(i) * n + j];
                        if (g == 0.0) continue;
                        const double* Ai = ad->values.data() + static_cast<std::size_t>(i) * k;
                        double* dBj = bd->grad.data() + static_cast<std::size_t>(j) * k;
                        for (int p = 0; p < k; ++p) dBj[p] += g * Ai[p];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = detail::make_output(a.shape(), {&a, &b});
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    if (out.requires_grad()) {
        Tape::active()->record([ad = a.data(), bd = b.data(), od = out.data()] {
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = detail::make_output(a.shape(), {&a, &b});
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    if (out.requires_grad()) {
        Tape::active()->record([ad = a.data(), bd = b.data(), od = out.data()] {
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    ad->grad[i] += od->grad[i] * bd->values[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    bd->grad[i] += od->grad[i] * ad->values[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = detail::make_output(a.shape(), {&a});
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
    if (out.requires_grad()) {
        Tape::active()->record([ad = a.data(), od = out.data(), c] {
            if (!ad->requires_grad) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
        });
    }
    return out;
}

// broadcast a row vector over every row of x
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    int r = x.rows(), c = x.cols();
    if (static_cast<int>(bias.size()) != c)
        throw DimensionError("add_bias: bias length " + std::to_string(bias.size()) +
                             " vs columns " + std::to_string(c));
    Tensor out = detail::make_output(x.shape(), {&x, &bias});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + bias[static_cast<std::size_t>(j)];
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), bd = bias.data(), od = out.data(), r, c] {
            if (xd->requires_grad) {
                xd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        bd->grad[static_cast<std::size_t>(j)] +=
                            od->grad[static_cast<std::size_t>(i) * c + j];
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = detail::make_output(x.shape(), {&x});
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data()] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                if (xd->values[i] > 0.0) xd->grad[i] += od->grad[i];
        });
    }
    return out;
}

// Negative-side slope sampled per element during training, fixed to the
// interval midpoint at inference. The sampled slopes are cached for backward.
inline Tensor rrelu(const Tensor& x, double lower, double upper, bool training, RngState& rng) {
    if (!(lower > 0.0 && lower <= upper && upper < 1.0))
        throw ConfigError("rrelu: bounds must satisfy 0 < lower <= upper < 1, got (" +
                          std::to_string(lower) + ", " + std::to_string(upper) + ")");
    Tensor out = detail::make_output(x.shape(), {&x});
    std::vector<double> slopes(x.size(), 1.0);
    double mid = 0.5 * (lower + upper);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= 0.0) {
            out[i] = x[i];
        } else {
            double a = training ? rng.uniform(lower, upper) : mid;
            slopes[i] = a;
            out[i] = a * x[i];
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), slopes = std::move(slopes)] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i] * slopes[i];
        });
    }
    return out;
}

inline Tensor tanh_op(const Tensor& x) {
    Tensor out = detail::make_output(x.shape(), {&x});
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data()] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                xd->grad[i] += od->grad[i] * (1.0 - od->values[i] * od->values[i]);
        });
    }
    return out;
}

// Inverted dropout: survivors scaled by 1/(1-p) at train time, identity at
// inference.
inline Tensor dropout(const Tensor& x, double p, bool training, RngState& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) {
        Tensor out = detail::make_output(x.shape(), {&x});
        out.values() = x.values();
        if (out.requires_grad()) {
            Tape::active()->record([xd = x.data(), od = out.data()] {
                if (!xd->requires_grad) return;
                xd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
            });
        }
        return out;
    }
    Tensor out = detail::make_output(x.shape(), {&x});
    double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng.next_double() < p ? 0.0 : keep_scale;
        out[i] = x[i] * mask[i];
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), mask = std::move(mask)] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i] * mask[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / cross entropy

// row-wise softmax with max subtraction
inline Tensor softmax_rows(const Tensor& x) {
    int r = x.rows(), c = x.cols();
    Tensor out = detail::make_output(x.shape(), {&x});
    for (int i = 0; i < r; ++i) {
        double mx = x.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            double e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), r, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const double* y = od->values.data() + static_cast<std::size_t>(i) * c;
                const double* g = od->grad.data() + static_cast<std::size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += y[j] * g[j];
                double* dx = xd->grad.data() + static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// softmax along an axis of a 1-d or 2-d tensor (axis 0 on vectors, 0/1 on
// matrices); used directly by the spec-facing helpers and tests
inline Tensor softmax(const Tensor& x, int axis = -1) {
    if (x.ndim() == 1) {
        Tensor m = Tensor::from({1, x.dim(0)}, x.values(), false);
        // preserve grad flow by reshaping through a recorded copy below
        Tensor out = detail::make_output(x.shape(), {&x});
        // forward
        double mx = x[0];
        for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = std::exp(x[i] - mx);
            sum += out[i];
        }
        for (std::size_t i = 0; i < x.size(); ++i) out[i] /= sum;
        if (out.requires_grad()) {
            Tape::active()->record([xd = x.data(), od = out.data()] {
                if (!xd->requires_grad) return;
                xd->ensure_grad();
                double dot = 0.0;
                for (std::size_t j = 0; j < od->values.size(); ++j)
                    dot += od->values[j] * od->grad[j];
                for (std::size_t j = 0; j < od->values.size(); ++j)
                    xd->grad[j] += od->values[j] * (od->grad[j] - dot);
            });
        }
        return out;
    }
    if (axis == -1) axis = 1;
    if (axis == 1) return softmax_rows(x);
    if (axis != 0) throw UsageError("softmax: axis must be 0 or 1");
    // column softmax: compute per column
    int r = x.rows(), c = x.cols();
    Tensor out = detail::make_output(x.shape(), {&x});
    for (int j = 0; j < c; ++j) {
        double mx = x.at(0, j);
        for (int i = 1; i < r; ++i) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int i = 0; i < r; ++i) {
            out.at(i, j) = std::exp(x.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (int i = 0; i < r; ++i) out.at(i, j) /= sum;
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), r, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (int j = 0; j < c; ++j) {
                double dot = 0.0;
                for (int i = 0; i < r; ++i)
                    dot += od->values[static_cast<std::size_t>(i) * c + j] *
                           od->grad[static_cast<std::size_t>(i) * c + j];
                for (int i = 0; i < r; ++i) {
                    std::size_t k = static_cast<std::size_t>(i) * c + j;
                    xd->grad[k] += od->values[k] * (od->grad[k] - dot);
                }
            }
        });
    }
    return out;
}

// mean negative log softmax probability of the gold labels, fused
// log-sum-exp
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& gold) {
    int b = logits.rows(), c = logits.cols();
    if (static_cast<int>(gold.size()) != b)
        throw UsageError("cross_entropy: " + std::to_string(gold.size()) + " labels for " +
                         std::to_string(b) + " rows");
    for (int i = 0; i < b; ++i)
        if (gold[static_cast<std::size_t>(i)] < 0 || gold[static_cast<std::size_t>(i)] >= c)
            throw DataError("cross_entropy: label " + std::to_string(gold[i]) +
                            " out of range [0, " + std::to_string(c) + ") at row " +
                            std::to_string(i));
    Tensor out = detail::make_output({1}, {&logits});
    std::vector<double> probs(static_cast<std::size_t>(b) * c);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const double* z = logits.values().data() + static_cast<std::size_t>(i) * c;
        double mx = z[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(z[j] - mx);
        double lse = mx + std::log(sum);
        total += lse - z[gold[static_cast<std::size_t>(i)]];
        for (int j = 0; j < c; ++j)
            probs[static_cast<std::size_t>(i) * c + j] = std::exp(z[j] - lse);
    }
    out[0] = total / b;
    if (out.requires_grad()) {
        Tape::active()->record(
            [ld = logits.data(), od = out.data(), probs = std::move(probs), gold, b, c] {
                if (!ld->requires_grad) return;
                ld->ensure_grad();
                double g = od->grad[0] / b;
                for (int i = 0; i < b; ++i)
                    for (int j = 0; j < c; ++j) {
                        std::size_t k = static_cast<std::size_t>(i) * c + j;
                        double delta = (j == gold[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                        ld->grad[k] += g * (probs[k] - delta);
                    }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape / gather ops

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    if (n != x.size())
        throw DimensionError("reshape: size mismatch, " + x.shape_str());
    Tensor out = detail::make_output(std::move(shape), {&x});
    out.values() = x.values();
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data()] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
        });
    }
    return out;
}

// out row t = x row indices[t]; backward scatter-adds, so repeated indices
// act as broadcast with summed gradients
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
    int r = x.rows(), c = x.cols();
    Tensor out = detail::make_output({static_cast<int>(indices.size()), c}, {&x});
    for (std::size_t t = 0; t < indices.size(); ++t) {
        int i = indices[t];
        if (i < 0 || i >= r)
            throw DataError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                            std::to_string(r) + ")");
        std::copy_n(x.values().data() + static_cast<std::size_t>(i) * c, c,
                    out.values().data() + t * c);
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), indices, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t t = 0; t < indices.size(); ++t) {
                double* dst = xd->grad.data() + static_cast<std::size_t>(indices[t]) * c;
                const double* src = od->grad.data() + t * c;
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int start, int count) {
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    return gather_rows(x, idx);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: empty input");
    int r = parts[0].rows();
    int total = 0;
    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) {
        if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
        total += p.cols();
        ptrs.push_back(&p);
    }
    bool rg = recording();
    if (rg) {
        rg = false;
        for (const Tensor& p : parts) rg = rg || p.requires_grad();
    }
    Tensor out({r, total}, rg);
    int off = 0;
    for (const Tensor& p : parts) {
        int c = p.cols();
        for (int i = 0; i < r; ++i)
            std::copy_n(p.values().data() + static_cast<std::size_t>(i) * c, c,
                        out.values().data() + static_cast<std::size_t>(i) * total + off);
        off += c;
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<TensorData>> datas;
        for (const Tensor& p : parts) datas.push_back(p.data());
        Tape::active()->record([datas = std::move(datas), od = out.data(), r, total] {
            int off = 0;
            for (auto& pd : datas) {
                int c = pd->shape[1];
                if (pd->requires_grad) {
                    pd->ensure_grad();
                    for (int i = 0; i < r; ++i) {
                        const double* src =
                            od->grad.data() + static_cast<std::size_t>(i) * total + off;
                        double* dst = pd->grad.data() + static_cast<std::size_t>(i) * c;
                        for (int j = 0; j < c; ++j) dst[j] += src[j];
                    }
                }
                off += c;
            }
        });
    }
    return out;
}

inline Tensor vstack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("vstack: empty input");
    int c = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != c) throw DimensionError("vstack: column mismatch");
        total += p.rows();
    }
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    rg = rg && recording();
    Tensor out({total, c}, rg);
    int off = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.values().data(), p.size(),
                    out.values().data() + static_cast<std::size_t>(off) * c);
        off += p.rows();
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<TensorData>> datas;
        for (const Tensor& p : parts) datas.push_back(p.data());
        Tape::active()->record([datas = std::move(datas), od = out.data(), c] {
            std::size_t off = 0;
            for (auto& pd : datas) {
                if (pd->requires_grad) {
                    pd->ensure_grad();
                    for (std::size_t i = 0; i < pd->values.size(); ++i)
                        pd->grad[i] += od->grad[off + i];
                }
                off += pd->values.size();
            }
        });
    }
    return out;
}

// scale row i of x by s[i]
inline Tensor mul_rowscale(const Tensor& x, const Tensor& s) {
    int r = x.rows(), c = x.cols();
    if (static_cast<int>(s.size()) != r)
        throw DimensionError("mul_rowscale: scale length " + std::to_string(s.size()) +
                             " vs rows " + std::to_string(r));
    Tensor out = detail::make_output(x.shape(), {&x, &s});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) * s[static_cast<std::size_t>(i)];
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), sd = s.data(), od = out.data(), r, c] {
            if (xd->requires_grad) {
                xd->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    double si = sd->values[static_cast<std::size_t>(i)];
                    for (int j = 0; j < c; ++j)
                        xd->grad[static_cast<std::size_t>(i) * c + j] +=
                            od->grad[static_cast<std::size_t>(i) * c + j] * si;
                }
            }
            if (sd->requires_grad) {
                sd->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < c; ++j)
                        acc += od->grad[static_cast<std::size_t>(i) * c + j] *
                               xd->values[static_cast<std::size_t>(i) * c + j];
                    sd->grad[static_cast<std::size_t>(i)] += acc;
                }
            }
        });
    }
    return out;
}

// zero out invalid rows; gradient passes through valid rows only
inline Tensor mask_rows(const Tensor& x, const std::vector<char>& valid) {
    int r = x.rows(), c = x.cols();
    if (static_cast<int>(valid.size()) != r)
        throw DimensionError("mask_rows: mask length mismatch");
    Tensor out = detail::make_output(x.shape(), {&x});
    for (int i = 0; i < r; ++i) {
        if (valid[static_cast<std::size_t>(i)])
            std::copy_n(x.values().data() + static_cast<std::size_t>(i) * c, c,
                        out.values().data() + static_cast<std::size_t>(i) * c);
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), valid, r, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (int i = 0; i < r; ++i) {
                if (!valid[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < c; ++j)
                    xd->grad[static_cast<std::size_t>(i) * c + j] +=
                        od->grad[static_cast<std::size_t>(i) * c + j];
            }
        });
    }
    return out;
}

// sum contiguous blocks of block_rows rows -> [num_blocks x c]
inline Tensor segment_sum_rows(const Tensor& x, int num_blocks, int block_rows) {
    int r = x.rows(), c = x.cols();
    if (r != num_blocks * block_rows)
        throw DimensionError("segment_sum_rows: rows " + std::to_string(r) + " != " +
                             std::to_string(num_blocks) + "*" + std::to_string(block_rows));
    Tensor out = detail::make_output({num_blocks, c}, {&x});
    for (int b = 0; b < num_blocks; ++b)
        for (int i = 0; i < block_rows; ++i)
            for (int j = 0; j < c; ++j) out.at(b, j) += x.at(b * block_rows + i, j);
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), num_blocks, block_rows, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (int b = 0; b < num_blocks; ++b)
                for (int i = 0; i < block_rows; ++i)
                    for (int j = 0; j < c; ++j)
                        xd->grad[static_cast<std::size_t>(b * block_rows + i) * c + j] +=
                            od->grad[static_cast<std::size_t>(b) * c + j];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = detail::make_output({1}, {&x});
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    out[0] = s;
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data()] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += od->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling

// per-channel maximum over the valid rows of each contiguous block;
// gradient routes to the first occurrence of the maximum
inline Tensor max_pool_segments(const Tensor& x, int num_blocks, int block_rows,
                                const std::vector<char>& valid) {
    int r = x.rows(), c = x.cols();
    if (r != num_blocks * block_rows || static_cast<int>(valid.size()) != r)
        throw DimensionError("max_pool_segments: inconsistent block layout");
    Tensor out = detail::make_output({num_blocks, c}, {&x});
    std::vector<int> argmax(static_cast<std::size_t>(num_blocks) * c, -1);
    for (int b = 0; b < num_blocks; ++b) {
        bool any = false;
        for (int i = 0; i < block_rows; ++i) {
            int row = b * block_rows + i;
            if (!valid[static_cast<std::size_t>(row)]) continue;
            for (int j = 0; j < c; ++j) {
                std::size_t k = static_cast<std::size_t>(b) * c + j;
                if (!any || x.at(row, j) > out.at(b, j)) {
                    if (!any || x.at(row, j) > out.at(b, j)) {
                        out.at(b, j) = x.at(row, j);
                        argmax[k] = row;
                    }
                }
            }
            any = true;
        }
        if (!any)
            throw DegenerateInputError("max_pool_segments: block " + std::to_string(b) +
                                       " has no valid positions");
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), od = out.data(), argmax = std::move(argmax),
                                num_blocks, c] {
            if (!xd->requires_grad) return;
            xd->ensure_grad();
            for (int b = 0; b < num_blocks; ++b)
                for (int j = 0; j < c; ++j) {
                    std::size_t k = static_cast<std::size_t>(b) * c + j;
                    xd->grad[static_cast<std::size_t>(argmax[k]) * c + j] += od->grad[k];
                }
        });
    }
    return out;
}

// single-sequence variant: [n x c] -> [1 x c]
inline Tensor max_pool_seq(const Tensor& h, const std::vector<char>& valid) {
    return max_pool_segments(h, 1, h.rows(), valid);
}

// ---------------------------------------------------------------------------
// normalization

struct BnState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;

    void init(int channels) {
        running_mean.assign(static_cast<std::size_t>(channels), 0.0);
        running_var.assign(static_cast<std::size_t>(channels), 1.0);
        initialized = true;
    }
};

// Per-channel statistics over valid rows (all instances and positions of a
// batch pooled together). Invalid rows output zero. Biased variance is used
// both for normalization and for the running average.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const std::vector<char>& valid, BnState& state, double momentum,
                         double eps, bool training, bool update_stats = true) {
    int r = x.rows(), c = x.cols();
    if (static_cast<int>(gamma.size()) != c || static_cast<int>(beta.size()) != c)
        throw DimensionError("batch_norm: affine parameter length mismatch");
    if (static_cast<int>(valid.size()) != r)
        throw DimensionError("batch_norm: mask length mismatch");
    if (!state.initialized) state.init(c);

    int n_valid = 0;
    for (char v : valid) n_valid += v ? 1 : 0;
    if (training && n_valid == 0)
        throw DegenerateInputError("batch_norm: no valid positions in batch");

    std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
    std::vector<double> var(static_cast<std::size_t>(c), 0.0);
    if (training) {
        for (int i = 0; i < r; ++i) {
            if (!valid[static_cast<std::size_t>(i)]) continue;
            for (int j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] += x.at(i, j);
        }
        for (int j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] /= n_valid;
        for (int i = 0; i < r; ++i) {
            if (!valid[static_cast<std::size_t>(i)]) continue;
            for (int j = 0; j < c; ++j) {
                double d = x.at(i, j) - mean[static_cast<std::size_t>(j)];
                var[static_cast<std::size_t>(j)] += d * d;
            }
        }
        for (int j = 0; j < c; ++j) var[static_cast<std::size_t>(j)] /= n_valid;
        if (update_stats) {
            for (int j = 0; j < c; ++j) {
                state.running_mean[static_cast<std::size_t>(j)] =
                    (1.0 - momentum) * state.running_mean[static_cast<std::size_t>(j)] +
                    momentum * mean[static_cast<std::size_t>(j)];
                state.running_var[static_cast<std::size_t>(j)] =
                    (1.0 - momentum) * state.running_var[static_cast<std::size_t>(j)] +
                    momentum * var[static_cast<std::size_t>(j)];
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> invstd(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j)
        invstd[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + eps);

    Tensor out = detail::make_output(x.shape(), {&x, &gamma, &beta});
    std::vector<double> xhat(static_cast<std::size_t>(r) * c, 0.0);
    for (int i = 0; i < r; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < c; ++j) {
            std::size_t k = static_cast<std::size_t>(i) * c + j;
            xhat[k] = (x.at(i, j) - mean[static_cast<std::size_t>(j)]) *
                      invstd[static_cast<std::size_t>(j)];
            out.at(i, j) = gamma[static_cast<std::size_t>(j)] * xhat[k] +
                           beta[static_cast<std::size_t>(j)];
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), gd = gamma.data(), bd = beta.data(),
                                od = out.data(), valid, xhat = std::move(xhat),
                                invstd = std::move(invstd), n_valid, training, r, c] {
            // per-channel sums over valid rows
            std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_gx(static_cast<std::size_t>(c), 0.0);
            for (int i = 0; i < r; ++i) {
                if (!valid[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < c; ++j) {
                    std::size_t k = static_cast<std::size_t>(i) * c + j;
                    sum_g[static_cast<std::size_t>(j)] += od->grad[k];
                    sum_gx[static_cast<std::size_t>(j)] += od->grad[k] * xhat[k];
                }
            }
            if (gd->requires_grad) {
                gd->ensure_grad();
                for (int j = 0; j < c; ++j)
                    gd->grad[static_cast<std::size_t>(j)] += sum_gx[static_cast<std::size_t>(j)];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (int j = 0; j < c; ++j)
                    bd->grad[static_cast<std::size_t>(j)] += sum_g[static_cast<std::size_t>(j)];
            }
            if (xd->requires_grad) {
                xd->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    if (!valid[static_cast<std::size_t>(i)]) continue;
                    for (int j = 0; j < c; ++j) {
                        std::size_t k = static_cast<std::size_t>(i) * c + j;
                        double gj = gd->values[static_cast<std::size_t>(j)] *
                                    invstd[static_cast<std::size_t>(j)];
                        if (training) {
                            xd->grad[k] += gj * (od->grad[k] -
                                                 sum_g[static_cast<std::size_t>(j)] / n_valid -
                                                 xhat[k] * sum_gx[static_cast<std::size_t>(j)] /
                                                     n_valid);
                        } else {
                            xd->grad[k] += gj * od->grad[k];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// normalize each row over the channel axis, then apply affine
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    int r = x.rows(), c = x.cols();
    if (static_cast<int>(gamma.size()) != c || static_cast<int>(beta.size()) != c)
        throw DimensionError("layer_norm: affine parameter length mismatch");
    Tensor out = detail::make_output(x.shape(), {&x, &gamma, &beta});
    std::vector<double> xhat(static_cast<std::size_t>(r) * c);
    std::vector<double> invstd(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= c;
        double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            std::size_t k = static_cast<std::size_t>(i) * c + j;
            xhat[k] = (x.at(i, j) - mean) * is;
            out.at(i, j) = gamma[static_cast<std::size_t>(j)] * xhat[k] +
                           beta[static_cast<std::size_t>(j)];
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([xd = x.data(), gd = gamma.data(), bd = beta.data(),
                                od = out.data(), xhat = std::move(xhat),
                                invstd = std::move(invstd), r, c] {
            if (gd->requires_grad) {
                gd->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        std::size_t k = static_cast<std::size_t>(i) * c + j;
                        gd->grad[static_cast<std::size_t>(j)] += od->grad[k] * xhat[k];
                    }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        bd->grad[static_cast<std::size_t>(j)] +=
                            od->grad[static_cast<std::size_t>(i) * c + j];
            }
            if (xd->requires_grad) {
                xd->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int j = 0; j < c; ++j) {
                        std::size_t k = static_cast<std::size_t>(i) * c + j;
                        double gy = od->grad[k] * gd->values[static_cast<std::size_t>(j)];
                        sum_g += gy;
                        sum_gx += gy * xhat[k];
                    }
                    for (int j = 0; j < c; ++j) {
                        std::size_t k = static_cast<std::size_t>(i) * c + j;
                        double gy = od->grad[k] * gd->values[static_cast<std::size_t>(j)];
                        xd->grad[k] += invstd[static_cast<std::size_t>(i)] *
                                       (gy - sum_g / c - xhat[k] * sum_gx / c);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// relative-position scores

// out[i][j] = r_i . m_{j-i}, where row (offset + center) of table holds
// m_offset. table is [(2*center+1) x d].
inline Tensor relpos_scores(const Tensor& queries, const Tensor& table, int n_keys) {
    int n = queries.rows(), d = queries.cols();
    int rows = table.rows(), center = (rows - 1) / 2;
    if (table.cols() != d)
        throw DimensionError("relpos_scores: width mismatch " + queries.shape_str() + " vs " +
                             table.shape_str());
    if (rows % 2 == 0) throw DimensionError("relpos_scores: table must have odd row count");
    if (n_keys - 1 > center || n - 1 > center)
        throw DimensionError("relpos_scores: sequence length " +
                             std::to_string(std::max(n, n_keys)) +
                             " exceeds configured maximum " + std::to_string(center + 1));
    Tensor out = detail::make_output({n, n_keys}, {&queries, &table});
    for (int i = 0; i < n; ++i) {
        const double* ri = queries.values().data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < n_keys; ++j) {
            const double* mj =
                table.values().data() + static_cast<std::size_t>(j - i + center) * d;
            double s = 0.0;
            for (int p = 0; p < d; ++p) s += ri[p] * mj[p];
            out.at(i, j) = s;
        }
    }
    if (out.requires_grad()) {
        Tape::active()->record([qd = queries.data(), td = table.data(), od = out.data(), n,
                                n_keys, d, center] {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n_keys; ++j) {
                    double g = od->grad[static_cast<std::size_t>(i) * n_keys + j];
                    if (g == 0.0) continue;
                    std::size_t mrow = static_cast<std::size_t>(j - i + center) * d;
                    if (qd->requires_grad) {
                        qd->ensure_grad();
                        for (int p = 0; p < d; ++p)
                            qd->grad[static_cast<std::size_t>(i) * d + p] +=
                                g * td->values[mrow + p];
                    }
                    if (td->requires_grad) {
                        td->ensure_grad();
                        for (int p = 0; p < d; ++p)
                            td->grad[mrow + p] += g * qd->values[static_cast<std::size_t>(i) * d + p];
                    }
                }
        });
    }
    return out;
}

}  // namespace relattn
