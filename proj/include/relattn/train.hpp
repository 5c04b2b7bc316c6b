#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "relattn/data.hpp"
#include "relattn/errors.hpp"
#include "relattn/eval.hpp"
#include "relattn/model.hpp"
#include "relattn/ops.hpp"
#include "relattn/params.hpp"
#include "relattn/rng.hpp"

namespace relattn {

struct TrainConfig {
    double lr0 = 0.1;
    double decay = 0.9;
    int patience = 1;
    int decay_start_epoch = 15;  // decays may first fire on the following epoch
    int epochs = 60;
    int batch_size = 50;
    std::uint64_t seed = 1;
    // fidelity note: the reference setup uses neither of these; off by default
    double grad_clip = 0.0;
    double weight_decay = 0.0;

    void validate() const {
        if (lr0 <= 0 || decay <= 0 || decay > 1) throw ConfigError("invalid lr0/decay");
        if (patience < 1 || epochs < 1 || batch_size < 1 || decay_start_epoch < 0)
            throw ConfigError("patience, epochs, batch_size must be positive");
        if (grad_clip < 0 || weight_decay < 0)
            throw ConfigError("grad_clip and weight_decay must be non-negative");
    }
};

struct TrainState {
    int epoch = 0;  // 1-based, set before schedule_update
    double lr = 0.1;
    double best_f1 = -1.0;
    int best_epoch = -1;
    int since_improvement = 0;
    bool improved = false;  // outcome of the most recent schedule_update
};

// p <- p - lr*g (plus optional L2 term), then clear gradients. Parameters
// with requires_grad unset (frozen embeddings) are left untouched.
inline void sgd_step(ParamStore& params, double lr, double grad_clip = 0.0,
                     double weight_decay = 0.0) {
    double scale = 1.0;
    if (grad_clip > 0.0) {
        double sq = 0.0;
        for (std::size_t i = 0; i < params.count(); ++i) {
            Tensor t = params.tensor(i);
            if (!t.data()->requires_grad) continue;
            for (double g : t.grad()) sq += g * g;
        }
        double norm = std::sqrt(sq);
        if (norm > grad_clip) scale = grad_clip / norm;
    }
    for (std::size_t i = 0; i < params.count(); ++i) {
        Tensor t = params.tensor(i);
        if (!t.data()->requires_grad) continue;
        t.data()->ensure_grad();
        auto& v = t.values();
        auto& g = t.grad();
        for (std::size_t k = 0; k < v.size(); ++k) {
            double grad = g[k] * scale + weight_decay * v[k];
            v[k] -= lr * grad;
            g[k] = 0.0;
        }
    }
}

// Plateau rule: strict improvement resets the counter and updates the best;
// otherwise the counter grows, and once it reaches the patience after the
// decay-start epoch the rate is multiplied by the decay factor.
inline double schedule_update(TrainState& state, double dev_f1, const TrainConfig& cfg) {
    state.improved = dev_f1 > state.best_f1;
    if (state.improved) {
        state.best_f1 = dev_f1;
        state.best_epoch = state.epoch;
        state.since_improvement = 0;
    } else {
        ++state.since_improvement;
        if (state.epoch > cfg.decay_start_epoch && state.since_improvement >= cfg.patience) {
            state.lr *= cfg.decay;
            state.since_improvement = 0;
        }
    }
    return state.lr;
}

struct EpochRow {
    int epoch;
    double loss, dev_p, dev_r, dev_f1, lr;
};

struct TrainResult {
    std::vector<EpochRow> log;
    double best_dev_f1 = 0.0;
    int best_epoch = -1;
};

inline std::string csv_header() { return "epoch,loss,dev_p,dev_r,dev_f1,lr"; }

inline std::string csv_row(const EpochRow& r) {
    std::ostringstream os;
    os << r.epoch << ',' << std::setprecision(17) << r.loss << ',' << r.dev_p << ',' << r.dev_r
       << ',' << r.dev_f1 << ',' << r.lr;
    return os.str();
}

namespace detail {

inline std::vector<std::vector<double>> snapshot_bn(Model& model) {
    std::vector<std::vector<double>> out;
    for (auto& st : model.layer_states())
        for (BnState* bn : {&st.norm1, &st.norm2}) {
            if (!bn->initialized) bn->init(model.config().d_model());
            out.push_back(bn->running_mean);
            out.push_back(bn->running_var);
        }
    return out;
}

inline void restore_bn(Model& model, const std::vector<std::vector<double>>& snap) {
    std::size_t idx = 0;
    for (auto& st : model.layer_states())
        for (BnState* bn : {&st.norm1, &st.norm2}) {
            bn->init(model.config().d_model());
            bn->running_mean = snap[idx++];
            bn->running_var = snap[idx++];
        }
}

}  // namespace detail

// Full training loop: seeded shuffles, mini-batch SGD on cross-entropy, a dev
// evaluation per epoch driving the plateau schedule, and best-on-dev model
// selection. The logged lr is the rate after that epoch's schedule update.
// Writes one CSV row per epoch to `log` when provided.
inline TrainResult train(Model& model, const std::vector<RelationInstance>& train_split,
                         const std::vector<RelationInstance>& dev_split, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
    cfg.validate();
    if (train_split.empty()) throw DataError("training split is empty");
    if (dev_split.empty()) throw DataError("dev split is empty");

    RngState rng(cfg.seed);
    TrainState state;
    state.lr = cfg.lr0;
    TrainResult result;
    std::vector<std::vector<double>> best_params = model.params().snapshot();
    std::vector<std::vector<double>> best_bn = detail::snapshot_bn(model);

    std::vector<int> order(train_split.size());
    std::iota(order.begin(), order.end(), 0);
    if (log) *log << csv_header() << '\n';

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<RelationInstance> chunk;
            chunk.reserve(end - start);
            for (std::size_t i = start; i < end; ++i)
                chunk.push_back(train_split[static_cast<std::size_t>(order[i])]);
            Batch batch = encode_batch(chunk, model.word_vocab(), model.pos_vocab(),
                                       model.ner_vocab(), model.labels(),
                                       model.config().encoder.l_max);
            Tape tape;
            Tensor logits = model.forward(batch, true, rng, true);
            Tensor loss = cross_entropy(logits, batch.labels);
            double lv = loss[0];
            if (!std::isfinite(lv))
                throw NumericError("non-finite loss " + std::to_string(lv) + " at epoch " +
                                   std::to_string(epoch) + ", batch starting at instance " +
                                   std::to_string(start));
            backward(loss, tape);
            sgd_step(model.params(), state.lr, cfg.grad_clip, cfg.weight_decay);
            loss_sum += lv * static_cast<double>(end - start);
            seen += end - start;
        }

        ScoredPredictions dev = score_model(model, dev_split, cfg.batch_size);
        state.epoch = epoch;
        double lr_after = schedule_update(state, dev.report.f1, cfg);
        if (state.improved) {
            best_params = model.params().snapshot();
            best_bn = detail::snapshot_bn(model);
        }
        EpochRow row{epoch, loss_sum / static_cast<double>(seen), dev.report.precision,
                     dev.report.recall, dev.report.f1, lr_after};
        result.log.push_back(row);
        if (log) *log << csv_row(row) << '\n';
    }

    model.params().restore(best_params);
    detail::restore_bn(model, best_bn);
    result.best_dev_f1 = state.best_f1;
    result.best_epoch = state.best_epoch;
    return result;
}

// Majority vote over per-model class-probability rows for one instance; ties
// go to the candidate with the larger summed probability, then to the lowest
// label index.
inline int ensemble_vote(const std::vector<std::vector<double>>& probs) {
    if (probs.empty()) throw UsageError("ensemble_vote: no model outputs");
    std::size_t num_labels = probs[0].size();
    std::vector<int> votes(num_labels, 0);
    std::vector<double> mass(num_labels, 0.0);
    for (const auto& p : probs) {
        if (p.size() != num_labels) throw ConfigError("ensemble_vote: label count mismatch");
        std::size_t best = 0;
        for (std::size_t j = 1; j < num_labels; ++j)
            if (p[j] > p[best]) best = j;
        ++votes[best];
        for (std::size_t j = 0; j < num_labels; ++j) mass[j] += p[j];
    }
    std::size_t winner = 0;
    for (std::size_t j = 1; j < num_labels; ++j) {
        if (votes[j] > votes[winner] ||
            (votes[j] == votes[winner] && mass[j] > mass[winner]))
            winner = j;
    }
    return static_cast<int>(winner);
}

inline std::vector<int> ensemble_predict(std::vector<Model*>& models, const Batch& batch) {
    if (models.empty()) throw UsageError("ensemble_predict: no models");
    for (Model* m : models)
        if (m->labels().labels != models[0]->labels().labels)
            throw ConfigError("ensemble_predict: models disagree on the label set");
    RngState rng(0);
    std::vector<Tensor> prob_rows;
    prob_rows.reserve(models.size());
    for (Model* m : models) {
        Tensor logits = m->forward(batch, false, rng);
        prob_rows.push_back(softmax_rows(logits));
    }
    std::vector<int> out(static_cast<std::size_t>(batch.size));
    int num_labels = prob_rows[0].cols();
    for (int i = 0; i < batch.size; ++i) {
        std::vector<std::vector<double>> per_model;
        per_model.reserve(models.size());
        for (const Tensor& p : prob_rows) {
            std::vector<double> row(static_cast<std::size_t>(num_labels));
            for (int j = 0; j < num_labels; ++j) row[static_cast<std::size_t>(j)] = p.at(i, j);
            per_model.push_back(std::move(row));
        }
        out[static_cast<std::size_t>(i)] = ensemble_vote(per_model);
    }
    return out;
}

}  // namespace relattn
