#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relattn/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"relation classification with a relative-position self-attention encoder"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, data_path, out_dir = "out";
    std::vector<std::string> overrides, checkpoints;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "key=value configuration file")->required();
        cmd->add_option("-s,--set", overrides, "override a configuration key (key=value)");
    };

    CLI::App* train = app.add_subcommand("train", "train a model and keep the best-on-dev weights");
    add_config(train);

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a labeled dataset");
    eval->add_option("checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("data", data_path, "TACRED-schema JSON file")->required();
    eval->add_option("-o,--out", out_dir, "output directory");

    CLI::App* predict = app.add_subcommand("predict", "write one predicted label per input line");
    predict->add_option("checkpoint", checkpoint, "model checkpoint")->required();
    predict->add_option("data", data_path, "TACRED-schema JSON file")->required();
    predict->add_option("-o,--out", out_dir, "output directory");

    CLI::App* ensemble =
        app.add_subcommand("ensemble", "majority-vote over several checkpoints, then score");
    ensemble->add_option("checkpoints", checkpoints, "model checkpoints")->required();
    ensemble->add_option("--data", data_path, "TACRED-schema JSON file")->required();
    ensemble->add_option("-o,--out", out_dir, "output directory");

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference gradient check on a reduced model");
    add_config(gradcheck);

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic task as JSON splits");
    add_config(synth);
    synth->add_option("-o,--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : relattn::kUsage;
    }

    if (train->parsed()) return relattn::cmd_train(config_path, overrides);
    if (eval->parsed()) return relattn::cmd_eval(checkpoint, data_path, out_dir);
    if (predict->parsed()) return relattn::cmd_predict(checkpoint, data_path, out_dir);
    if (ensemble->parsed()) return relattn::cmd_ensemble(checkpoints, data_path, out_dir);
    if (gradcheck->parsed()) return relattn::cmd_gradcheck(config_path, overrides);
    if (synth->parsed()) return relattn::cmd_synth(config_path, overrides, out_dir);
    return relattn::kUsage;
}
