#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "relattn/config.hpp"
#include "relattn/eval.hpp"
#include "relattn/gradcheck.hpp"
#include "relattn/model.hpp"
#include "relattn/train.hpp"

namespace relattn {

// exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric failure
enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace detail {

// relative output paths land under $RELATTN_OUT when it is set
inline std::filesystem::path resolve_out_dir(const std::string& out_dir) {
    std::filesystem::path p(out_dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("RELATTN_OUT")) p = std::filesystem::path(root) / p;
    }
    std::filesystem::create_directories(p);
    return p;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const DegenerateInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    }
}

struct Splits {
    std::vector<RelationInstance> train, dev, test;
};

inline Splits load_splits(const RunConfig& cfg) {
    if (cfg.data_source == "synth") {
        SynthSplits s = generate_synthetic(cfg.synth);
        return {std::move(s.train), std::move(s.dev), std::move(s.test)};
    }
    Splits s;
    if (cfg.train_path.empty()) throw ConfigError("train_path is required when data_source=files");
    if (cfg.dev_path.empty()) throw ConfigError("dev_path is required when data_source=files");
    s.train = load_tacred_json(cfg.train_path);
    s.dev = load_tacred_json(cfg.dev_path);
    if (!cfg.test_path.empty()) s.test = load_tacred_json(cfg.test_path);
    return s;
}

inline Model build_model(const RunConfig& cfg, const std::vector<RelationInstance>& train_split) {
    std::vector<std::vector<std::string>> token_seqs;
    for (const auto& inst : train_split) token_seqs.push_back(inst.tokens);
    Vocab wv = build_vocab(token_seqs, cfg.vocab_min_count);
    Vocab pv = build_pos_vocab(train_split);
    Vocab nv = build_ner_vocab(train_split);
    LabelSet ls = LabelSet::from_instances(train_split);
    if (!cfg.glove_path.empty()) {
        RngState rng(cfg.model.seed);
        Tensor table = load_glove(cfg.glove_path, wv, cfg.model.word_dim, rng);
        return Model(cfg.model, std::move(wv), std::move(pv), std::move(nv), std::move(ls),
                     &table);
    }
    return Model(cfg.model, std::move(wv), std::move(pv), std::move(nv), std::move(ls));
}

inline void write_report(const ScoreReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    out << report_to_json(r).dump(2) << "\n";
}

inline void write_predictions(const std::vector<int>& pred_ids, const LabelSet& ls,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    for (int id : pred_ids) out << ls.labels[static_cast<std::size_t>(id)] << "\n";
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    return detail::guarded([&] {
        RunConfig cfg = load_run_config(config_path, overrides);
        detail::Splits splits = detail::load_splits(cfg);
        Model model = detail::build_model(cfg, splits.train);
        auto out_dir = detail::resolve_out_dir(cfg.out_dir);

        std::ofstream log(out_dir / "train_log.csv");
        if (!log) throw DataError("cannot write " + (out_dir / "train_log.csv").string());
        TrainResult res = train(model, splits.train, splits.dev, cfg.train, &log);
        log.close();

        save_checkpoint(model, (out_dir / "model.ckpt").string());
        ScoredPredictions dev = score_model(model, splits.dev, cfg.train.batch_size);
        detail::write_report(dev.report, out_dir / "dev_report.json");
        std::cout << "best dev F1 " << res.best_dev_f1 << " (epoch " << res.best_epoch << ")\n";
        if (!splits.test.empty()) {
            ScoredPredictions test = score_model(model, splits.test, cfg.train.batch_size);
            detail::write_report(test.report, out_dir / "test_report.json");
            std::cout << "test\n" << format_report(test.report);
        }
        return kOk;
    });
}

inline int cmd_eval(const std::string& checkpoint, const std::string& data_path,
                    const std::string& out_dir_arg) {
    return detail::guarded([&] {
        Model model = load_checkpoint(checkpoint);
        std::vector<RelationInstance> data = load_tacred_json(data_path);
        if (data.empty()) throw DataError(data_path + " contains no instances");
        ScoredPredictions scored = score_model(model, data);
        auto out_dir = detail::resolve_out_dir(out_dir_arg);
        detail::write_report(scored.report, out_dir / "report.json");
        detail::write_predictions(scored.pred_ids, model.labels(), out_dir / "predictions.txt");
        std::cout << format_report(scored.report);
        return kOk;
    });
}

inline int cmd_predict(const std::string& checkpoint, const std::string& data_path,
                       const std::string& out_dir_arg) {
    return detail::guarded([&] {
        Model model = load_checkpoint(checkpoint);
        std::vector<RelationInstance> data = load_tacred_json(data_path);
        if (data.empty()) throw DataError(data_path + " contains no instances");
        ScoredPredictions scored = score_model(model, data);
        auto out_dir = detail::resolve_out_dir(out_dir_arg);
        detail::write_predictions(scored.pred_ids, model.labels(), out_dir / "predictions.txt");
        std::cout << "wrote " << scored.pred_ids.size() << " predictions\n";
        return kOk;
    });
}

inline int cmd_ensemble(const std::vector<std::string>& checkpoints, const std::string& data_path,
                        const std::string& out_dir_arg) {
    return detail::guarded([&] {
        if (checkpoints.empty()) throw UsageError("ensemble needs at least one checkpoint");
        std::vector<std::unique_ptr<Model>> owned;
        std::vector<Model*> models;
        for (const std::string& p : checkpoints) {
            owned.push_back(std::make_unique<Model>(load_checkpoint(p)));
            models.push_back(owned.back().get());
        }
        std::vector<RelationInstance> data = load_tacred_json(data_path);
        if (data.empty()) throw DataError(data_path + " contains no instances");

        const Model& first = *models[0];
        std::vector<int> pred, gold;
        const int batch_size = 50;
        for (std::size_t start = 0; start < data.size(); start += batch_size) {
            std::size_t end = std::min(data.size(), start + batch_size);
            std::vector<RelationInstance> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                                data.begin() + static_cast<std::ptrdiff_t>(end));
            Batch batch =
                encode_batch(chunk, first.word_vocab(), first.pos_vocab(), first.ner_vocab(),
                             first.labels(), first.config().encoder.l_max);
            std::vector<int> p = ensemble_predict(models, batch);
            pred.insert(pred.end(), p.begin(), p.end());
            gold.insert(gold.end(), batch.labels.begin(), batch.labels.end());
        }
        ScoreReport report = micro_prf(gold, pred, first.labels().na_index());
        auto out_dir = detail::resolve_out_dir(out_dir_arg);
        detail::write_report(report, out_dir / "report.json");
        detail::write_predictions(pred, first.labels(), out_dir / "predictions.txt");
        std::cout << format_report(report);
        return kOk;
    });
}

inline int cmd_gradcheck(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
    return detail::guarded([&] {
        RunConfig cfg = load_run_config(config_path, overrides);
        SynthConfig sc = cfg.synth;
        sc.train_count = 4;
        sc.dev_count = 1;
        sc.test_count = 1;
        SynthSplits splits = generate_synthetic(sc);
        Model model = detail::build_model(cfg, splits.train);
        // move off the symmetric zero-initialized tables
        RngState jitter(cfg.model.seed + 7);
        for (std::size_t i = 0; i < model.params().count(); ++i) {
            Tensor t = model.params().tensor(i);
            for (std::size_t k = 0; k < t.size(); ++k) t[k] += jitter.uniform(-0.05, 0.05);
        }
        Batch batch = encode_batch(splits.train, model.word_vocab(), model.pos_vocab(),
                                   model.ner_vocab(), model.labels(),
                                   model.config().encoder.l_max);
        auto loss_fn = [&] {
            RngState rng(cfg.model.seed);
            return cross_entropy(model.forward(batch, false, rng, false), batch.labels);
        };
        GradCheckResult res = finite_diff_check(loss_fn, model.params());
        std::cout << "max relative error " << res.max_rel_error << " at " << res.worst_param
                  << "[" << res.worst_index << "] (analytic " << res.analytic << ", numeric "
                  << res.numeric << ")\n";
        if (!(res.max_rel_error < 1e-4)) {
            std::cerr << "gradient check failed\n";
            return kNumeric;
        }
        return kOk;
    });
}

inline int cmd_synth(const std::string& config_path, const std::vector<std::string>& overrides,
                     const std::string& out_dir_arg) {
    return detail::guarded([&] {
        RunConfig cfg = load_run_config(config_path, overrides);
        SynthSplits s = generate_synthetic(cfg.synth);
        auto out_dir = detail::resolve_out_dir(out_dir_arg.empty() ? cfg.out_dir : out_dir_arg);
        save_tacred_json(s.train, (out_dir / "train.json").string());
        save_tacred_json(s.dev, (out_dir / "dev.json").string());
        save_tacred_json(s.test, (out_dir / "test.json").string());
        std::cout << "wrote " << s.train.size() << "/" << s.dev.size() << "/" << s.test.size()
                  << " instances to " << out_dir.string() << "\n";
        return kOk;
    });
}

}  // namespace relattn
