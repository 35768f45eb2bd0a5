// Command-line front end: train, eval, prune, verify, landscape, regress,
// meanshift. Configs are flat `key = value` files; see README.

#include <iostream>

#include <CLI11.hpp>

#include "morphnn/runner.hpp"

using namespace morphnn;

int main(int argc, char** argv) {
    CLI::App app{"morphological (max-plus/min-plus) neural networks"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, split_name = "test";
    std::string method = "l1", suite = "all", landscape_which = "mp", ms_model = "mp";
    std::string out_path = "out.csv";
    double ratio = 0.9, lr = 0.1;
    std::size_t keep = 0, batch = 1, epochs = 1000;
    long long seed_flag = -1;
    bool no_activation = false;

    auto add_common = [&](CLI::App* cmd, bool need_config) {
        auto* opt = cmd->add_option("--config", config_path, "run config file");
        if (need_config) opt->required();
        cmd->add_option("--seed", seed_flag, "override the config seed");
        cmd->add_option("--out", out_dir, "override the output directory");
    };

    CLI::App* train = app.add_subcommand("train", "train a network per the config");
    add_common(train, true);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, true);
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    eval->add_option("--split", split_name, "train|val|test");

    CLI::App* prune = app.add_subcommand("prune", "l1 or SNIP pruning");
    add_common(prune, true);
    prune->add_option("--checkpoint", checkpoint, "trained checkpoint (l1)");
    prune->add_option("--method", method, "l1|snip");
    prune->add_option("--ratio", ratio, "l1 pruning ratio");
    prune->add_option("--keep", keep, "SNIP keep count");

    CLI::App* verify = app.add_subcommand("verify", "run property suites");
    verify->add_option("--suite", suite,
                       "collapse|thm1|thm2|thm3|thm4|thm5|reprthm|gradcheck|all");
    verify->add_option("--seed", seed_flag, "suite seed");

    CLI::App* landscape = app.add_subcommand("landscape", "loss-surface CSV");
    landscape->add_option("--net", landscape_which, "mp|hybrid");
    landscape->add_option("--out", out_path, "CSV path");

    CLI::App* regress = app.add_subcommand("regress", "synthetic regression study");
    add_common(regress, true);
    regress->add_flag("--no-activation", no_activation, "disable the per-unit scaling");

    CLI::App* meanshift = app.add_subcommand("meanshift", "weight mean-shift study");
    meanshift->add_option("--model", ms_model, "linear|mp");
    meanshift->add_option("--batch", batch, "batch size");
    meanshift->add_option("--epochs", epochs, "epochs (one fresh batch each)");
    meanshift->add_option("--lr", lr, "learning rate");
    meanshift->add_option("--seed", seed_flag, "seed");
    meanshift->add_option("--out", out_path, "CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg = parse_config_file(config_path);
        if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
        if (!out_dir.empty()) cfg.out_dir = out_dir;

        if (train->parsed()) return cmd_train(cfg, std::cout);
        if (eval->parsed()) return cmd_eval(checkpoint, cfg, split_name, std::cout);
        if (prune->parsed()) return cmd_prune(checkpoint, method, ratio, keep, cfg, std::cout);
        if (verify->parsed())
            return cmd_verify(suite, seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : 7,
                              std::cout);
        if (landscape->parsed()) return cmd_landscape(landscape_which, out_path, std::cout);
        if (regress->parsed()) return cmd_regress(cfg, !no_activation, std::cout);
        if (meanshift->parsed())
            return cmd_meanshift(ms_model, batch, epochs, lr,
                                 seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : 0,
                                 out_path, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
