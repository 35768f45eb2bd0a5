#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>

#include "morphnn/data.hpp"
#include "morphnn/init.hpp"
#include "morphnn/layers.hpp"
#include "morphnn/pruning.hpp"

namespace morphnn {

/// Experiment description parsed from a flat `key = value` config file
/// (# comments). Seeds govern split, init, batching and dropout.
struct RunConfig {
    std::string dataset = "mnist"; // mnist | fashion-mnist | synth:<fn>
    std::string network = "mpm";   // preset name, or spec:<path>
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double dropout_rate = -1.0; // >= 0 overrides the preset
    std::string out_dir = "out";
    std::string data_dir;       // empty: $MORPHNN_DATA_DIR, else "data"

    std::optional<double> init_morph_mean, init_morph_std, init_act_std;
    std::optional<bool> init_zero_first;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

/// The fully connected and convolutional architectures of the experiments
/// section, by name: mlp, mp, dep, dep-half, act-mp, act-dep, act-dep-34,
/// act-dep-half, mpm, rmpm, rmpm-drop, mpm-svd, hybrid-mlp, lenet5,
/// mpm-lenet5, mpm-svd-lenet5.
NetworkSpec make_preset(const std::string& name);
bool is_preset(const std::string& name);

/// Initialization recipe for a preset/dataset pair (MP networks get the
/// shifted scheme; image datasets zero the first morphological layer).
InitScheme scheme_for(const std::string& network, const std::string& dataset);

/// Resolves cfg.network to a spec (preset or spec:<path> file).
NetworkSpec resolve_network(const RunConfig& cfg);

std::string dataset_dir(const RunConfig& cfg);
Dataset load_named_dataset(const RunConfig& cfg, bool test_split);

struct TrainResult {
    NetworkSpec spec;
    ParamSet params;
    std::string metrics_csv;
    double peak_train_acc = 0.0;
    double final_val_acc = 0.0;
    double best_val_acc = 0.0;
};

/// Full training loop: 80/20 split, Adam, per-epoch metrics rows
/// (epoch,train_acc,val_acc,train_loss,val_loss). Identical config + seed
/// reproduce metrics_csv byte for byte. initial_params, when given,
/// continue from an existing state (e.g. SNIP-masked init).
TrainResult train_run(const RunConfig& cfg, ParamSet* initial_params = nullptr,
                      std::ostream* log = nullptr);

/// Same loop on an explicit dataset (the full pool before the 80/20 split);
/// train_run loads the config's dataset and delegates here.
TrainResult train_on(const RunConfig& cfg, const Dataset& full,
                     ParamSet* initial_params = nullptr, std::ostream* log = nullptr);

/// SNIP masking + training on an explicit dataset.
TrainResult snip_train_on(const RunConfig& cfg, const Dataset& full, std::size_t keep_count,
                          std::ostream* log = nullptr);

double evaluate_accuracy(const NetworkSpec& spec, const ParamSet& params, const Dataset& ds,
                         std::size_t batch_size = 256);

struct RegressResult {
    double train_mse = 0.0;
    double test_mse = 0.0;
};

/// Regression study: MPM with two hidden layers of 100 on noisy synthetic
/// samples; `activated` toggles the per-unit scaling ablation.
RegressResult regress_run(RegressionFn fn, bool activated, std::size_t epochs,
                          std::size_t batch_size, double lr, std::uint64_t seed,
                          std::size_t n_train = 1024, std::size_t n_test = 1024,
                          double noise_std = 0.5, double lo = -4.0, double hi = 4.0,
                          std::ostream* log = nullptr);

/// SNIP at initialization then training: masks from one 128-sample batch of
/// the training split, keeping the global top keep_count entries.
TrainResult snip_train(const RunConfig& cfg, std::size_t keep_count,
                       std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Property suites shared by `verify` and the acceptance harness.
// ---------------------------------------------------------------------------

struct SuiteResult {
    bool pass = false;
    std::string detail;
};

SuiteResult verify_collapse(std::uint64_t seed, std::size_t n_inputs);
SuiteResult verify_thm1(std::uint64_t seed, std::size_t trials);
SuiteResult verify_thm2(std::uint64_t seed, std::size_t trials);
SuiteResult verify_thm3(std::uint64_t seed, std::size_t trials);
SuiteResult verify_thm4(std::uint64_t seed, std::size_t targets, std::size_t samples);
SuiteResult verify_thm5(std::uint64_t seed, std::size_t samples);
SuiteResult verify_reprthm(std::uint64_t seed);
SuiteResult verify_gradcheck(std::uint64_t seed);

// ---------------------------------------------------------------------------
// CLI command bodies (exit code 0/1); the tool in tools/ wires these to
// argument parsing.
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const std::string& checkpoint_dir, const RunConfig& cfg, const std::string& split,
             std::ostream& out);
int cmd_prune(const std::string& checkpoint_dir, const std::string& method, double ratio,
              std::size_t keep_count, const RunConfig& cfg, std::ostream& out);
int cmd_verify(const std::string& suite, std::uint64_t seed, std::ostream& out);
int cmd_landscape(const std::string& which, const std::string& out_path, std::ostream& out);
int cmd_regress(const RunConfig& cfg, bool activated, std::ostream& out);
int cmd_meanshift(const std::string& model, std::size_t batch, std::size_t epochs, double lr,
                  std::uint64_t seed, const std::string& out_path, std::ostream& out);

} // namespace morphnn
