#pragma once

#include <array>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relattn/data.hpp"
#include "relattn/errors.hpp"
#include "relattn/model.hpp"

namespace relattn {

// Micro-averaged scores over instances whose gold or predicted label is a
// real relation; the no-relation class earns no credit. Zero denominators
// yield 0, matching the official scorer's empty-prediction convention.
struct ScoreReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long correct = 0;
    long predicted_non_na = 0;
    long gold_non_na = 0;
    // per-relation counts keyed by label id: {correct, predicted, gold}
    std::map<int, std::array<long, 3>> by_label;
};

inline ScoreReport micro_prf(const std::vector<int>& gold, const std::vector<int>& pred,
                             int na_index) {
    if (gold.size() != pred.size())
        throw UsageError("micro_prf: gold and prediction lengths differ (" +
                         std::to_string(gold.size()) + " vs " + std::to_string(pred.size()) + ")");
    ScoreReport r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        int g = gold[i], p = pred[i];
        if (p != na_index) {
            ++r.predicted_non_na;
            ++r.by_label[p][1];
        }
        if (g != na_index) {
            ++r.gold_non_na;
            ++r.by_label[g][2];
        }
        if (p == g && p != na_index) {
            ++r.correct;
            ++r.by_label[p][0];
        }
    }
    r.precision = r.predicted_non_na > 0
                      ? static_cast<double>(r.correct) / static_cast<double>(r.predicted_non_na)
                      : 0.0;
    r.recall = r.gold_non_na > 0
                   ? static_cast<double>(r.correct) / static_cast<double>(r.gold_non_na)
                   : 0.0;
    r.f1 = r.precision + r.recall > 0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    return r;
}

struct ScoredPredictions {
    std::vector<int> pred_ids;
    ScoreReport report;
};

// Deterministic inference pass over a split: encode in fixed-size batches,
// predict, score against the instance labels.
inline ScoredPredictions score_model(Model& model, const std::vector<RelationInstance>& split,
                                     int batch_size = 50) {
    if (batch_size < 1) throw UsageError("score_model: batch_size must be positive");
    ScoredPredictions out;
    std::vector<int> gold;
    RngState rng(0);  // unused in inference mode
    for (std::size_t start = 0; start < split.size();
         start += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(split.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<RelationInstance> chunk(split.begin() + static_cast<std::ptrdiff_t>(start),
                                            split.begin() + static_cast<std::ptrdiff_t>(end));
        Batch batch = encode_batch(chunk, model.word_vocab(), model.pos_vocab(),
                                   model.ner_vocab(), model.labels(), model.config().encoder.l_max);
        Tensor logits = model.forward(batch, false, rng);
        std::vector<int> pred = Model::predict(logits);
        out.pred_ids.insert(out.pred_ids.end(), pred.begin(), pred.end());
        gold.insert(gold.end(), batch.labels.begin(), batch.labels.end());
    }
    out.report = micro_prf(gold, out.pred_ids, model.labels().na_index());
    return out;
}

inline nlohmann::json report_to_json(const ScoreReport& r) {
    return {{"precision", r.precision}, {"recall", r.recall},
            {"f1", r.f1},              {"correct", r.correct},
            {"predicted_non_na", r.predicted_non_na}, {"gold_non_na", r.gold_non_na}};
}

inline std::string format_report(const ScoreReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "precision  recall     f1\n";
    os << std::setw(9) << r.precision << "  " << std::setw(6) << r.recall << "  " << std::setw(6)
       << r.f1 << "\n";
    os << "correct " << r.correct << " / predicted " << r.predicted_non_na << " / gold "
       << r.gold_non_na << "\n";
    return os.str();
}

}  // namespace relattn
