#include "morphnn/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "morphnn/optim.hpp"
#include "morphnn/serialize.hpp"
#include "morphnn/theory.hpp"

namespace morphnn {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key == "dataset") cfg.dataset = value;
        else if (key == "network") cfg.network = value;
        else if (key == "epochs") cfg.epochs = std::stoul(value);
        else if (key == "batch_size") cfg.batch_size = std::stoul(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "dropout_rate") cfg.dropout_rate = std::stod(value);
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "data_dir") cfg.data_dir = value;
        else if (key == "init.morph_mean") cfg.init_morph_mean = std::stod(value);
        else if (key == "init.morph_std") cfg.init_morph_std = std::stod(value);
        else if (key == "init.act_std") cfg.init_act_std = std::stod(value);
        else if (key == "init.zero_first_layer") cfg.init_zero_first = value == "true" || value == "1";
        else throw ValueError("config line " + std::to_string(lineno) + ": unknown key " + key);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kInput = 784, kHidden = 256, kClasses = 10, kDepth = 6;

enum class FcFamily { MP, DEP, MPM, RMPM, MPM_SVD };

NetworkSpec fc_morph_net(FcFamily family, bool biased, LambdaMode lambda, Activation act,
                         double dropout) {
    NetworkSpec spec;
    spec.input_shape = {kInput};
    spec.output_size = kClasses;
    for (std::size_t i = 0; i < kDepth; ++i) {
        LayerSpec l;
        l.n_in = i == 0 ? kInput : kHidden;
        l.n_out = i + 1 == kDepth ? kClasses : kHidden;
        l.is_output_layer = i + 1 == kDepth;
        l.dropout_rate = dropout;
        switch (family) {
            case FcFamily::MP:
                l.kind = LayerKind::MP;
                l.bias = biased;
                l.activation = act;
                break;
            case FcFamily::DEP:
                l.kind = LayerKind::DEP;
                l.bias = biased;
                l.lambda_mode = lambda;
                l.activation = act;
                break;
            case FcFamily::MPM:
                l.kind = LayerKind::MPM;
                l.activation = act;
                break;
            case FcFamily::RMPM:
                l.kind = LayerKind::RMPM;
                l.activation = act;
                l.residual = !l.is_output_layer && l.n_in == l.n_out;
                break;
            case FcFamily::MPM_SVD:
                l.kind = LayerKind::MPM_SVD;
                l.activation = act;
                break;
        }
        spec.layers.push_back(l);
    }
    return spec;
}

NetworkSpec mlp_net() {
    NetworkSpec spec;
    spec.input_shape = {kInput};
    spec.output_size = kClasses;
    for (std::size_t i = 0; i < kDepth; ++i) {
        LayerSpec l;
        l.kind = LayerKind::LINEAR;
        l.n_in = i == 0 ? kInput : kHidden;
        l.n_out = i + 1 == kDepth ? kClasses : kHidden;
        l.is_output_layer = i + 1 == kDepth;
        spec.layers.push_back(l);
        if (i + 1 < kDepth) {
            LayerSpec r;
            r.kind = LayerKind::RELU;
            spec.layers.push_back(r);
        }
    }
    return spec;
}

NetworkSpec hybrid_mlp_net() {
    NetworkSpec spec;
    spec.input_shape = {kInput};
    spec.output_size = kClasses;
    for (std::size_t i = 0; i < 5; ++i) {
        LayerSpec l;
        l.kind = LayerKind::HYBRID_BLOCK;
        l.n_in = i == 0 ? kInput : kHidden;
        l.n_out = kHidden;
        spec.layers.push_back(l);
    }
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = kHidden;
    out.n_out = kClasses;
    out.is_output_layer = true;
    spec.layers.push_back(out);
    return spec;
}

LayerSpec conv_layer(LayerKind kind, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                     int padding) {
    LayerSpec l;
    l.kind = kind;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.kh = l.kw = k;
    l.padding = padding;
    return l;
}

LayerSpec maxpool2() {
    LayerSpec l;
    l.kind = LayerKind::MAXPOOL;
    l.kh = l.kw = 2;
    l.stride = 2;
    return l;
}

// LeNet-5 variant: max pooling, 5x5 kernels with padding 1 on the two
// feature extractors, third 5x5 stage valid, classifier head without a
// final bias.
NetworkSpec lenet5_net() {
    NetworkSpec spec;
    spec.input_shape = {1, 28, 28};
    spec.output_size = kClasses;
    spec.layers.push_back(conv_layer(LayerKind::LINEAR_CONV, 1, 6, 5, 1));
    spec.layers.push_back(LayerSpec{.kind = LayerKind::RELU});
    spec.layers.push_back(maxpool2());
    spec.layers.push_back(conv_layer(LayerKind::LINEAR_CONV, 6, 16, 5, 1));
    spec.layers.push_back(LayerSpec{.kind = LayerKind::RELU});
    spec.layers.push_back(maxpool2());
    spec.layers.push_back(LayerSpec{.kind = LayerKind::FLATTEN});
    LayerSpec f1;
    f1.kind = LayerKind::LINEAR;
    f1.n_in = 400;
    f1.n_out = 120;
    spec.layers.push_back(f1);
    spec.layers.push_back(LayerSpec{.kind = LayerKind::RELU});
    LayerSpec f2;
    f2.kind = LayerKind::LINEAR;
    f2.n_in = 120;
    f2.n_out = 84;
    spec.layers.push_back(f2);
    spec.layers.push_back(LayerSpec{.kind = LayerKind::RELU});
    LayerSpec f3;
    f3.kind = LayerKind::LINEAR;
    f3.n_in = 84;
    f3.n_out = 10;
    f3.bias = false;
    f3.is_output_layer = true;
    spec.layers.push_back(f3);
    return spec;
}

// Morphological LeNet-5: all three conv stages morphological (the third is
// the 16->120 5x5 stage, activated like the others), MPM classifier head.
NetworkSpec mpm_lenet5_net(bool svd) {
    LayerKind conv = svd ? LayerKind::MORPH_CONV_S2 : LayerKind::MORPH_CONV_S1;
    LayerKind fc = svd ? LayerKind::MPM_SVD : LayerKind::MPM;
    Activation act = svd ? Activation::Svd : Activation::Scale;
    NetworkSpec spec;
    spec.input_shape = {1, 28, 28};
    spec.output_size = kClasses;
    spec.layers.push_back(conv_layer(conv, 1, 6, 5, 1));
    spec.layers.push_back(maxpool2());
    spec.layers.push_back(conv_layer(conv, 6, 16, 5, 1));
    spec.layers.push_back(maxpool2());
    spec.layers.push_back(conv_layer(conv, 16, 120, 5, 0));
    spec.layers.push_back(LayerSpec{.kind = LayerKind::FLATTEN});
    LayerSpec f1;
    f1.kind = fc;
    f1.n_in = 120;
    f1.n_out = 84;
    f1.activation = act;
    spec.layers.push_back(f1);
    LayerSpec f2;
    f2.kind = fc;
    f2.n_in = 84;
    f2.n_out = 10;
    f2.activation = act;
    f2.is_output_layer = true;
    spec.layers.push_back(f2);
    return spec;
}

} // namespace

bool is_preset(const std::string& name) {
    static const std::vector<std::string> names = {
        "mlp", "mp", "dep", "dep-half", "act-mp", "act-dep", "act-dep-34", "act-dep-half",
        "mpm", "rmpm", "rmpm-drop", "mpm-svd", "hybrid-mlp", "lenet5", "mpm-lenet5",
        "mpm-svd-lenet5"};
    return std::find(names.begin(), names.end(), name) != names.end();
}

NetworkSpec make_preset(const std::string& name) {
    NetworkSpec spec;
    if (name == "mlp") spec = mlp_net();
    else if (name == "mp")
        spec = fc_morph_net(FcFamily::MP, true, LambdaMode::learned(), Activation::None, 0.0);
    else if (name == "dep")
        spec = fc_morph_net(FcFamily::DEP, false, LambdaMode::learned(), Activation::None, 0.0);
    else if (name == "dep-half")
        spec = fc_morph_net(FcFamily::DEP, false, LambdaMode::fixed_at(0.5), Activation::None, 0.0);
    else if (name == "act-mp")
        spec = fc_morph_net(FcFamily::MP, true, LambdaMode::learned(), Activation::Scale, 0.0);
    else if (name == "act-dep")
        spec = fc_morph_net(FcFamily::DEP, false, LambdaMode::learned(), Activation::Scale, 0.0);
    else if (name == "act-dep-34")
        spec = fc_morph_net(FcFamily::DEP, false, LambdaMode::fixed_at(0.75), Activation::Scale, 0.0);
    else if (name == "act-dep-half")
        spec = fc_morph_net(FcFamily::DEP, false, LambdaMode::fixed_at(0.5), Activation::Scale, 0.0);
    else if (name == "mpm")
        spec = fc_morph_net(FcFamily::MPM, true, LambdaMode::learned(), Activation::Scale, 0.0);
    else if (name == "rmpm")
        spec = fc_morph_net(FcFamily::RMPM, true, LambdaMode::learned(), Activation::Scale, 0.0);
    else if (name == "rmpm-drop")
        spec = fc_morph_net(FcFamily::RMPM, true, LambdaMode::learned(), Activation::Scale, 0.3);
    else if (name == "mpm-svd")
        spec = fc_morph_net(FcFamily::MPM_SVD, true, LambdaMode::learned(), Activation::Svd, 0.0);
    else if (name == "hybrid-mlp") spec = hybrid_mlp_net();
    else if (name == "lenet5") spec = lenet5_net();
    else if (name == "mpm-lenet5") spec = mpm_lenet5_net(false);
    else if (name == "mpm-svd-lenet5") spec = mpm_lenet5_net(true);
    else throw ValueError("unknown network preset: " + name);
    spec.validate();
    return spec;
}

InitScheme scheme_for(const std::string& network, const std::string& dataset) {
    InitScheme s;
    if (network == "mp" || network == "act-mp") s = mp_init_scheme();
    if (dataset.rfind("mnist", 0) == 0 || dataset.rfind("fashion-mnist", 0) == 0)
        s.zero_first_morph_layer = true;
    return s;
}

NetworkSpec resolve_network(const RunConfig& cfg) {
    if (cfg.network.rfind("spec:", 0) == 0) {
        std::ifstream f(cfg.network.substr(5));
        if (!f) throw IoError("cannot open spec file " + cfg.network.substr(5));
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return spec_from_json(text);
    }
    NetworkSpec spec = make_preset(cfg.network);
    if (cfg.dropout_rate >= 0.0)
        for (LayerSpec& l : spec.layers)
            if (!l.is_output_layer) l.dropout_rate = cfg.dropout_rate;
    return spec;
}

std::string dataset_dir(const RunConfig& cfg) {
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    if (const char* env = std::getenv("MORPHNN_DATA_DIR")) return env;
    return "data";
}

namespace {

std::string find_idx_file(const std::string& base) {
    namespace fs = std::filesystem;
    if (fs::exists(base)) return base;
    if (fs::exists(base + ".gz")) return base + ".gz";
    throw IoError("dataset file not found: " + base + "[.gz]");
}

} // namespace

Dataset load_named_dataset(const RunConfig& cfg, bool test_split) {
    if (cfg.dataset != "mnist" && cfg.dataset != "fashion-mnist")
        throw ValueError("classification training supports mnist/fashion-mnist, got " +
                         cfg.dataset);
    std::string dir = dataset_dir(cfg) + "/" + cfg.dataset;
    std::string img = test_split ? "/t10k-images-idx3-ubyte" : "/train-images-idx3-ubyte";
    std::string lab = test_split ? "/t10k-labels-idx1-ubyte" : "/train-labels-idx1-ubyte";
    Dataset ds = load_idx(find_idx_file(dir + img), find_idx_file(dir + lab));
    ds.name = cfg.dataset;
    return ds;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct SeedPlan {
    std::uint64_t split, init, batch, dropout;
    explicit SeedPlan(std::uint64_t seed) {
        Rng master(seed);
        split = master.next_u64();
        init = master.next_u64();
        batch = master.next_u64();
        dropout = master.next_u64();
    }
};

InitScheme scheme_from_config(const RunConfig& cfg) {
    InitScheme s = scheme_for(cfg.network, cfg.dataset);
    if (cfg.init_morph_mean) s.morph_mean = *cfg.init_morph_mean;
    if (cfg.init_morph_std) s.morph_std = *cfg.init_morph_std;
    if (cfg.init_act_std) s.act_std = *cfg.init_act_std;
    if (cfg.init_zero_first) s.zero_first_morph_layer = *cfg.init_zero_first;
    return s;
}

std::pair<double, double> eval_metrics(const NetworkSpec& spec, const ParamSet& params,
                                       const Dataset& ds, std::size_t batch_size) {
    double acc_sum = 0.0, loss_sum = 0.0;
    std::size_t n = ds.size();
    for (std::size_t at = 0; at < n; at += batch_size) {
        std::size_t take = std::min(batch_size, n - at);
        std::vector<std::size_t> idx(take);
        std::iota(idx.begin(), idx.end(), at);
        Dataset sub = ds.subset(idx);
        ForwardPass pass = forward(spec, params, std::move(sub.images));
        auto [loss, probs] = softmax_cross_entropy(pass.output(), sub.labels);
        acc_sum += accuracy(pass.output(), sub.labels) * static_cast<double>(take);
        loss_sum += loss * static_cast<double>(take);
    }
    return {acc_sum / static_cast<double>(n), loss_sum / static_cast<double>(n)};
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

double evaluate_accuracy(const NetworkSpec& spec, const ParamSet& params, const Dataset& ds,
                         std::size_t batch_size) {
    return eval_metrics(spec, params, ds, batch_size).first;
}

TrainResult train_run(const RunConfig& cfg, ParamSet* initial_params, std::ostream* log) {
    return train_on(cfg, load_named_dataset(cfg, false), initial_params, log);
}

TrainResult train_on(const RunConfig& cfg, const Dataset& pool, ParamSet* initial_params,
                     std::ostream* log) {
    NetworkSpec spec = resolve_network(cfg);
    SeedPlan seeds(cfg.seed);

    Dataset full = spec.input_shape.size() == 1 ? pool.flattened() : pool;
    auto [train, val] = split(full, SplitPlan{seeds.split, 0.8});

    TrainResult res;
    res.spec = spec;
    if (initial_params)
        res.params = std::move(*initial_params);
    else
        res.params = init_network(spec, scheme_from_config(cfg), seeds.init);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam adam(acfg);
    Rng dropout_rng(seeds.dropout);
    BatchStream stream(train, cfg.batch_size, seeds.batch);

    std::ostringstream csv;
    csv << "epoch,train_acc,val_acc,train_loss,val_loss\n";
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        stream.begin_epoch();
        double acc_sum = 0.0, loss_sum = 0.0;
        std::size_t seen = 0;
        while (auto batch = stream.next()) {
            ForwardPass pass =
                forward(spec, res.params, std::move(batch->x), true, &dropout_rng);
            int loss_id = pass.tape.add_cross_entropy(pass.output_id, batch->labels);
            double loss = pass.tape.value(loss_id)[0];
            double acc = accuracy(pass.output(), batch->labels);
            GradMap grads = pass.tape.backward(loss_id, Tensor({1}, std::vector<double>{1.0}));
            res.params.zero_grads();
            for (auto& [id, g] : grads) {
                if (id == kInputGradId) continue;
                res.params.at(id).grad = std::move(g);
            }
            adam.step(res.params);
            std::size_t b = batch->labels.size();
            acc_sum += acc * static_cast<double>(b);
            loss_sum += loss * static_cast<double>(b);
            seen += b;
        }
        double train_acc = acc_sum / static_cast<double>(seen);
        double train_loss = loss_sum / static_cast<double>(seen);
        auto [val_acc, val_loss] = eval_metrics(spec, res.params, val, 256);
        res.peak_train_acc = std::max(res.peak_train_acc, train_acc);
        res.best_val_acc = std::max(res.best_val_acc, val_acc);
        res.final_val_acc = val_acc;
        csv << epoch << "," << fmt(train_acc) << "," << fmt(val_acc) << "," << fmt(train_loss)
            << "," << fmt(val_loss) << "\n";
        if (log)
            *log << "epoch " << epoch << ": train_acc " << fmt(train_acc) << " val_acc "
                 << fmt(val_acc) << "\n";
    }
    res.metrics_csv = csv.str();
    return res;
}

TrainResult snip_train(const RunConfig& cfg, std::size_t keep_count, std::ostream* log) {
    return snip_train_on(cfg, load_named_dataset(cfg, false), keep_count, log);
}

TrainResult snip_train_on(const RunConfig& cfg, const Dataset& pool, std::size_t keep_count,
                          std::ostream* log) {
    NetworkSpec spec = resolve_network(cfg);
    SeedPlan seeds(cfg.seed);
    ParamSet params = init_network(spec, scheme_from_config(cfg), seeds.init);

    Dataset full = spec.input_shape.size() == 1 ? pool.flattened() : pool;
    auto [train, val] = split(full, SplitPlan{seeds.split, 0.8});

    BatchStream stream(train, 128, seeds.batch ^ 0x534e4950ull); // independent stream
    stream.begin_epoch();
    auto batch = stream.next();
    if (!batch) throw ValueError("snip: empty training split");
    PruneMask mask = snip_masks(spec, params, {*batch}, keep_count);
    apply_masks(params, mask);
    if (log) {
        SparsityReport rep = sparsity_report(params);
        *log << "snip kept " << rep.kept << " of " << rep.total << " prunable weights\n";
    }
    return train_on(cfg, pool, &params, log);
}

// ---------------------------------------------------------------------------
// Regression study
// ---------------------------------------------------------------------------

RegressResult regress_run(RegressionFn fn, bool activated, std::size_t epochs,
                          std::size_t batch_size, double lr, std::uint64_t seed,
                          std::size_t n_train, std::size_t n_test, double noise_std,
                          double lo, double hi, std::ostream* log) {
    NetworkSpec spec;
    spec.input_shape = {1};
    spec.output_size = 1;
    for (int i = 0; i < 3; ++i) {
        LayerSpec l;
        l.kind = LayerKind::MPM;
        l.n_in = i == 0 ? 1 : 100;
        l.n_out = i == 2 ? 1 : 100;
        l.activation = activated ? Activation::Scale : Activation::None;
        l.is_output_layer = i == 2;
        spec.layers.push_back(l);
    }
    SeedPlan seeds(seed);
    RegressionData train = synth_regression(fn, n_train, noise_std, lo, hi, seeds.split);
    RegressionData test = synth_regression(fn, n_test, noise_std, lo, hi, seeds.split ^ 1);

    ParamSet params = init_network(spec, InitScheme{}, seeds.init);
    AdamConfig acfg;
    acfg.lr = lr;
    Adam adam(acfg);
    Rng shuffle(seeds.batch);

    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    RegressResult out;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.index(i)]);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t at = 0; at < n_train; at += batch_size) {
            std::size_t take = std::min(batch_size, n_train - at);
            Tensor X({take, 1});
            Tensor Y({take, 1});
            for (std::size_t i = 0; i < take; ++i) {
                X[i] = train.x[order[at + i]];
                Y[i] = train.y[order[at + i]];
            }
            ForwardPass pass = forward(spec, params, std::move(X));
            int loss_id = pass.tape.add_mse(pass.output_id, Y);
            loss_sum += pass.tape.value(loss_id)[0] * static_cast<double>(take);
            seen += take;
            GradMap grads = pass.tape.backward(loss_id, Tensor({1}, std::vector<double>{1.0}));
            params.zero_grads();
            for (auto& [id, g] : grads) {
                if (id == kInputGradId) continue;
                params.at(id).grad = std::move(g);
            }
            adam.step(params);
        }
        out.train_mse = loss_sum / static_cast<double>(seen);
        if (log && (epoch + 1) % 50 == 0)
            *log << "epoch " << (epoch + 1) << ": train_mse " << out.train_mse << "\n";
    }
    ForwardPass pass = forward(spec, params, test.x);
    out.test_mse = mse(pass.output(), test.y).loss;
    return out;
}

// ---------------------------------------------------------------------------
// Verification suites
// ---------------------------------------------------------------------------

namespace {

// Dyadic rationals k/256 with |k| <= 2048: sums of a handful of these are
// exact in double precision, so tropical identities that hold over the reals
// hold bitwise.
double dyadic(Rng& rng, int span = 2048) {
    long k = static_cast<long>(rng.index(2 * span + 1)) - span;
    return static_cast<double>(k) / 256.0;
}

Tensor dyadic_tensor(const std::vector<std::size_t>& shape, Rng& rng) {
    Tensor t(shape);
    for (double& v : t) v = dyadic(rng);
    return t;
}

} // namespace

SuiteResult verify_collapse(std::uint64_t seed, std::size_t n_inputs) {
    Rng rng(seed);
    std::size_t remaining = n_inputs;
    double worst = 0.0;
    std::size_t nets = 0;
    while (remaining > 0) {
        std::size_t depth = 2 + rng.index(4);   // 2..5
        std::size_t width = 2 + rng.index(7);   // 2..8
        std::vector<MaxPlusLayer> layers;
        std::size_t in = width;
        for (std::size_t l = 0; l < depth; ++l) {
            std::size_t out = 2 + rng.index(7);
            layers.push_back({dyadic_tensor({out, in}, rng), dyadic_tensor({out}, rng)});
            in = out;
        }
        CollapsedLayer collapsed = collapse_stack(layers);
        ++nets;
        std::size_t trials = std::min<std::size_t>(remaining, 25);
        for (std::size_t t = 0; t < trials; ++t) {
            Tensor x = dyadic_tensor({width}, rng);
            Tensor a = stack_forward(layers, x);
            Tensor b = collapsed_forward(collapsed, x);
            for (std::size_t i = 0; i < a.size(); ++i)
                worst = std::max(worst, std::abs(a[i] - b[i]));
        }
        remaining -= trials;
    }
    std::ostringstream os;
    os << nets << " stacks, max |stack - collapsed| = " << worst;
    return {worst == 0.0, os.str()};
}

SuiteResult verify_thm1(std::uint64_t seed, std::size_t trials) {
    Rng rng(seed);
    AuditReport total;
    while (total.trials < trials) {
        std::size_t d = 2 + rng.index(5);
        std::size_t depth = 1 + rng.index(5);
        std::size_t width = 2 + rng.index(5);
        BuiltNetwork net = random_mp_only_net(d, depth, width, 1, rng);
        AuditReport r = check_thm1(net.spec, net.params, std::min<std::size_t>(10, trials - total.trials), rng);
        total.trials += r.trials;
        total.violations += r.violations;
        total.resampled_ties += r.resampled_ties;
        total.worst = std::max(total.worst, r.worst);
        if (r.violations && !total.failing_seed) total.failing_seed = r.failing_seed;
    }
    std::ostringstream os;
    os << total.trials << " trials, " << total.violations << " violations";
    if (total.violations) os << " (seed " << total.failing_seed << ")";
    return {total.violations == 0, os.str()};
}

SuiteResult verify_thm2(std::uint64_t seed, std::size_t trials) {
    Rng rng(seed);
    AuditReport total;
    while (total.trials < trials) {
        std::size_t d = 2 + rng.index(5);
        std::size_t depth = 1 + rng.index(4);
        std::size_t width = 2 + rng.index(5);
        std::size_t m = 1 + rng.index(4);
        BuiltNetwork net = random_mp_only_net(d, depth, width, m, rng);
        AuditReport r = check_thm2(net.spec, net.params, std::min<std::size_t>(5, trials - total.trials), rng);
        total.trials += r.trials;
        total.violations += r.violations;
        total.worst = std::max(total.worst, r.worst);
        if (r.violations && !total.failing_seed) total.failing_seed = r.failing_seed;
    }
    std::ostringstream os;
    os << total.trials << " trials, " << total.violations
       << " violations, max touched/layer " << total.worst;
    return {total.violations == 0, os.str()};
}

SuiteResult verify_thm3(std::uint64_t seed, std::size_t trials) {
    Rng rng(seed);
    AuditReport total;
    std::size_t done = 0;
    while (done < trials) {
        std::size_t d = 2 + rng.index(5);
        std::size_t depth = 1 + rng.index(4);
        std::size_t width = 2 + rng.index(5);
        int variant = static_cast<int>(rng.index(3));
        bool biased = variant == 1;
        Activation act = variant == 2 ? Activation::Sigmoid : Activation::None;
        BuiltNetwork net = random_dep_net(d, depth, width, biased, act, rng);
        AuditReport r = check_thm3(net.spec, net.params, std::min<std::size_t>(10, trials - done), rng);
        done += r.trials;
        total.trials += r.trials;
        total.violations += r.violations;
        total.worst = std::max(total.worst, r.worst);
        if (r.violations && !total.failing_seed) total.failing_seed = r.failing_seed;
    }
    std::ostringstream os;
    os << total.trials << " trials, " << total.violations << " violations, max |g|_1 "
       << total.worst;
    return {total.violations == 0, os.str()};
}

namespace {

// Uniform points in the l1 ball of radius R, one per row: direction on the
// l1 sphere, scaled by U(0,1) * R.
Tensor l1_ball_batch(std::size_t n, std::size_t d, double radius, Rng& rng) {
    Tensor X({n, d});
    for (std::size_t s = 0; s < n; ++s) {
        double norm = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            X.at(s, i) = rng.normal();
            norm += std::abs(X.at(s, i));
        }
        double r = radius * rng.uniform01();
        for (std::size_t i = 0; i < d; ++i) X.at(s, i) *= r / norm;
    }
    return X;
}

} // namespace

SuiteResult verify_thm4(std::uint64_t seed, std::size_t targets, std::size_t samples) {
    Rng rng(seed);
    double worst = 0.0;
    // Affine builders.
    for (std::size_t t = 0; t < targets; ++t) {
        std::size_t d = 1 + rng.index(6);
        AffineTarget target;
        target.a = Tensor({d});
        for (double& v : target.a) v = rng.uniform(-4.0, 4.0);
        target.b = rng.uniform(-4.0, 4.0);
        target.radius = rng.uniform(0.5, 3.0);
        BuiltNetwork net = build_affine_mpm(target);
        Tensor X = l1_ball_batch(samples, d, target.radius, rng);
        ForwardPass pass = forward(net.spec, net.params, X);
        for (std::size_t s = 0; s < samples; ++s) {
            double want = target.b;
            for (std::size_t i = 0; i < d; ++i) want += target.a[i] * X.at(s, i);
            worst = std::max(worst, std::abs(pass.output()[s] - want));
        }
    }
    // Max-plus-min merges.
    for (std::size_t t = 0; t < targets; ++t) {
        std::size_t d = 1 + rng.index(4);
        double radius = rng.uniform(0.5, 2.0);
        auto random_target = [&] {
            AffineTarget a;
            a.a = Tensor({d});
            for (double& v : a.a) v = rng.uniform(-3.0, 3.0);
            a.b = rng.uniform(-3.0, 3.0);
            a.radius = radius;
            return a;
        };
        std::vector<AffineTarget> maxes, mins;
        std::size_t K = 1 + rng.index(3), M = 1 + rng.index(3);
        for (std::size_t k = 0; k < K; ++k) maxes.push_back(random_target());
        for (std::size_t m = 0; m < M; ++m) mins.push_back(random_target());
        BuiltNetwork net = build_maxplusmin_mpm(maxes, mins, radius);
        Tensor X = l1_ball_batch(samples, d, radius, rng);
        ForwardPass pass = forward(net.spec, net.params, X);
        for (std::size_t s = 0; s < samples; ++s) {
            auto affine = [&](const AffineTarget& a) {
                double v = a.b;
                for (std::size_t i = 0; i < d; ++i) v += a.a[i] * X.at(s, i);
                return v;
            };
            double mx = kNegInf, mn = kPosInf;
            for (const auto& a : maxes) mx = std::max(mx, affine(a));
            for (const auto& a : mins) mn = std::min(mn, affine(a));
            worst = std::max(worst, std::abs(pass.output()[s] - (mx + mn)));
        }
    }
    std::ostringstream os;
    os << "max |built - target| = " << worst;
    return {worst <= 1e-9, os.str()};
}

SuiteResult verify_thm5(std::uint64_t seed, std::size_t samples) {
    Rng rng(seed);
    double worst = 0.0;

    // ReLU reference: 3 hidden layers of 8.
    {
        NetworkSpec ref;
        ref.input_shape = {4};
        ref.output_size = 2;
        std::vector<std::size_t> sizes = {4, 8, 8, 8, 2};
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            LayerSpec l;
            l.kind = LayerKind::LINEAR;
            l.n_in = sizes[i];
            l.n_out = sizes[i + 1];
            l.is_output_layer = i + 2 == sizes.size();
            ref.layers.push_back(l);
            if (!l.is_output_layer) ref.layers.push_back(LayerSpec{.kind = LayerKind::RELU});
        }
        ParamSet params = init_network(ref, InitScheme{}, rng.next_u64());
        double radius = 2.0;
        BuiltNetwork hybrid = embed_relu_into_hybrid(ref, params, radius);
        Tensor X = l1_ball_batch(samples, 4, radius, rng);
        ForwardPass a = forward(ref, params, X);
        ForwardPass b = forward(hybrid.spec, hybrid.params, X);
        for (std::size_t i = 0; i < a.output().size(); ++i)
            worst = std::max(worst, std::abs(a.output()[i] - b.output()[i]));
    }

    // Maxout reference: two maxout layers, P = 2 and 3.
    {
        NetworkSpec ref;
        ref.input_shape = {3};
        ref.output_size = 2;
        LayerSpec m1;
        m1.kind = LayerKind::MAXOUT;
        m1.n_in = 3;
        m1.n_out = 6;
        m1.pool = 2;
        LayerSpec m2;
        m2.kind = LayerKind::MAXOUT;
        m2.n_in = 6;
        m2.n_out = 4;
        m2.pool = 3;
        LayerSpec out;
        out.kind = LayerKind::LINEAR;
        out.n_in = 4;
        out.n_out = 2;
        out.is_output_layer = true;
        ref.layers = {m1, m2, out};
        ParamSet params = init_network(ref, InitScheme{}, rng.next_u64());
        double radius = 2.0;
        BuiltNetwork hybrid = embed_maxout_into_hybrid(ref, params, radius);
        Tensor X = l1_ball_batch(samples, 3, radius, rng);
        ForwardPass a = forward(ref, params, X);
        ForwardPass b = forward(hybrid.spec, hybrid.params, X);
        for (std::size_t i = 0; i < a.output().size(); ++i)
            worst = std::max(worst, std::abs(a.output()[i] - b.output()[i]));
    }
    std::ostringstream os;
    os << "max |hybrid - reference| = " << worst;
    return {worst <= 1e-9, os.str()};
}

SuiteResult verify_reprthm(std::uint64_t seed) {
    (void)seed;
    std::ostringstream os;
    bool ok = true;

    // x/2 identity at x = 4.
    {
        ReprResult r = repr_identity_eval(Tensor::vector({0.5}), Tensor::vector({4.0}), 1e-3);
        ok = ok && std::abs(r.exact - 2.0) < 1e-12 && std::abs(r.approx - r.exact) <= 2e-3;
        os << "x/2: approx " << r.approx << "; ";
    }
    // Weighted pair, sum < 1.
    {
        ReprResult r = repr_identity_eval(Tensor::vector({0.3, 0.5}),
                                          Tensor::vector({1.0, 2.0}), 1e-3);
        ok = ok && std::abs(r.exact - 1.3) < 1e-12 && std::abs(r.approx - r.exact) <= 2e-3;
        os << "0.3/0.5: gap " << (r.exact - r.approx) << "; ";
    }
    // Refinement: the reported bound halves with the step and the measured
    // gap never grows.
    {
        double prev_gap = kPosInf, prev_bound = kPosInf;
        for (double step : {4e-3, 2e-3, 1e-3}) {
            ReprResult r = repr_identity_eval(Tensor::vector({0.25, 0.35}),
                                              Tensor::vector({-1.0, 2.5}), step);
            double gap = r.exact - r.approx;
            ok = ok && gap >= -1e-12 && gap <= 2.0 * step + 1e-12;
            ok = ok && gap <= prev_gap + 1e-15;
            if (prev_bound < kPosInf) ok = ok && r.gap_bound <= 0.5 * prev_bound + 1e-15;
            prev_gap = gap;
            prev_bound = r.gap_bound;
        }
        os << "refinement ok";
    }
    return {ok, os.str()};
}

SuiteResult verify_gradcheck(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    std::string worst_at;
    auto run = [&](const char* name, const NetworkSpec& spec, ParamSet& params, Tensor x) {
        GradCheckReport r = grad_check(spec, params, std::move(x), 1e-5, 1e-6, rng);
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_at = std::string(name) + ":" + r.location;
        }
    };

    auto fc_spec = [&](LayerKind kind, Activation act) {
        NetworkSpec spec;
        spec.input_shape = {4};
        spec.output_size = 3;
        for (int i = 0; i < 2; ++i) {
            LayerSpec l;
            l.kind = kind;
            l.n_in = 4;
            l.n_out = i == 1 ? 3 : 4;
            l.activation = act;
            l.is_output_layer = i == 1;
            l.residual = kind == LayerKind::RMPM && !l.is_output_layer;
            spec.layers.push_back(l);
        }
        return spec;
    };

    auto sample_input = [&](std::size_t d) {
        Tensor x({d});
        for (double& v : x) v = rng.uniform(-1.0, 1.0);
        return x;
    };

    {
        NetworkSpec spec = fc_spec(LayerKind::MPM, Activation::Scale);
        ParamSet params = init_network(spec, InitScheme{}, rng.next_u64());
        run("mpm", spec, params, sample_input(4));
    }
    {
        NetworkSpec spec = fc_spec(LayerKind::RMPM, Activation::Scale);
        ParamSet params = init_network(spec, InitScheme{}, rng.next_u64());
        run("rmpm", spec, params, sample_input(4));
    }
    {
        NetworkSpec spec = fc_spec(LayerKind::MPM_SVD, Activation::Svd);
        ParamSet params = init_network(spec, InitScheme{}, rng.next_u64());
        run("mpm_svd", spec, params, sample_input(4));
    }
    {
        NetworkSpec spec;
        spec.input_shape = {4};
        spec.output_size = 2;
        LayerSpec h;
        h.kind = LayerKind::HYBRID_BLOCK;
        h.n_in = 4;
        h.n_out = 4;
        LayerSpec out;
        out.kind = LayerKind::LINEAR;
        out.n_in = 4;
        out.n_out = 2;
        out.is_output_layer = true;
        spec.layers = {h, out};
        ParamSet params = init_network(spec, InitScheme{}, rng.next_u64());
        run("hybrid", spec, params, sample_input(4));
    }
    // Morphological conv blocks, both settings, on a 2x5x5 input.
    for (bool svd : {false, true}) {
        NetworkSpec spec;
        spec.input_shape = {2, 5, 5};
        spec.output_size = 3 * 3 * 3;
        LayerSpec c;
        c.kind = svd ? LayerKind::MORPH_CONV_S2 : LayerKind::MORPH_CONV_S1;
        c.in_ch = 2;
        c.out_ch = 3;
        c.kh = c.kw = 3;
        c.padding = 0;
        LayerSpec fl;
        fl.kind = LayerKind::FLATTEN;
        fl.is_output_layer = true;
        spec.layers = {c, fl};
        ParamSet params = init_network(spec, InitScheme{}, rng.next_u64());
        Tensor x({2, 5, 5});
        for (double& v : x) v = rng.uniform(-1.0, 1.0);
        run(svd ? "morph_conv_s2" : "morph_conv_s1", spec, params, std::move(x));
    }
    std::ostringstream os;
    os << "max rel err " << worst << (worst_at.empty() ? "" : " at " + worst_at);
    return {worst <= 1e-6, os.str()};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& out) {
    namespace fs = std::filesystem;
    try {
        TrainResult res = train_run(cfg, nullptr, &out);
        fs::create_directories(cfg.out_dir);
        std::ofstream m(cfg.out_dir + "/metrics.csv", std::ios::binary);
        m << res.metrics_csv;
        save_checkpoint(cfg.out_dir + "/checkpoint", res.spec, res.params);
        std::ofstream s(cfg.out_dir + "/summary.json");
        s << "{\n  \"peak_train_acc\": " << res.peak_train_acc
          << ",\n  \"final_val_acc\": " << res.final_val_acc
          << ",\n  \"best_val_acc\": " << res.best_val_acc << "\n}\n";
        out << "peak train acc " << res.peak_train_acc << ", final val acc "
            << res.final_val_acc << "\n";
        return 0;
    } catch (const DivergenceError& e) {
        out << "training diverged: " << e.what() << "\n";
        return 1;
    }
}

int cmd_eval(const std::string& checkpoint_dir, const RunConfig& cfg, const std::string& split_name,
             std::ostream& out) {
    auto [spec, params] = load_checkpoint(checkpoint_dir);
    Dataset ds = load_named_dataset(cfg, split_name == "test");
    if (spec.input_shape.size() == 1) ds = ds.flattened();
    if (split_name == "train" || split_name == "val") {
        SeedPlan seeds(cfg.seed);
        auto [train, val] = split(ds, SplitPlan{seeds.split, 0.8});
        ds = split_name == "train" ? std::move(train) : std::move(val);
    } else if (split_name != "test") {
        out << "unknown split: " << split_name << "\n";
        return 1;
    }
    double acc = evaluate_accuracy(spec, params, ds);
    out << split_name << " accuracy " << acc << "\n";
    return 0;
}

int cmd_prune(const std::string& checkpoint_dir, const std::string& method, double ratio,
              std::size_t keep_count, const RunConfig& cfg, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    if (method == "l1") {
        auto [spec, params] = load_checkpoint(checkpoint_dir);
        PruneMask mask = l1_masks(params, ratio);
        apply_masks(params, mask);
        SparsityReport rep = sparsity_report(params);
        std::ofstream f(cfg.out_dir + "/sparsity.csv");
        f << rep.csv();
        save_checkpoint(cfg.out_dir + "/checkpoint", spec, params);
        Dataset test = load_named_dataset(cfg, true);
        if (spec.input_shape.size() == 1) test = test.flattened();
        double acc = evaluate_accuracy(spec, params, test);
        out << "l1 ratio " << ratio << ": kept " << rep.kept << "/" << rep.total
            << ", test accuracy " << acc << "\n";
        return 0;
    }
    if (method == "snip") {
        TrainResult res = snip_train(cfg, keep_count, &out);
        SparsityReport rep = sparsity_report(res.params);
        std::ofstream f(cfg.out_dir + "/sparsity.csv");
        f << rep.csv();
        std::ofstream m(cfg.out_dir + "/metrics.csv", std::ios::binary);
        m << res.metrics_csv;
        save_checkpoint(cfg.out_dir + "/checkpoint", res.spec, res.params);
        Dataset test = load_named_dataset(cfg, true);
        if (res.spec.input_shape.size() == 1) test = test.flattened();
        double acc = evaluate_accuracy(res.spec, res.params, test);
        out << "snip keep " << keep_count << ": kept " << rep.kept << "/" << rep.total
            << ", test accuracy " << acc << "\n";
        return 0;
    }
    out << "unknown pruning method: " << method << "\n";
    return 1;
}

int cmd_verify(const std::string& suite, std::uint64_t seed, std::ostream& out) {
    struct Entry {
        const char* name;
        std::function<SuiteResult()> run;
    };
    std::vector<Entry> all = {
        {"collapse", [&] { return verify_collapse(seed, 1000); }},
        {"thm1", [&] { return verify_thm1(seed, 1000); }},
        {"thm2", [&] { return verify_thm2(seed, 1000); }},
        {"thm3", [&] { return verify_thm3(seed, 1000); }},
        {"thm4", [&] { return verify_thm4(seed, 10, 1000); }},
        {"thm5", [&] { return verify_thm5(seed, 1000); }},
        {"reprthm", [&] { return verify_reprthm(seed); }},
        {"gradcheck", [&] { return verify_gradcheck(seed); }},
    };
    bool any = false, ok = true;
    for (const Entry& e : all) {
        if (suite != "all" && suite != e.name) continue;
        any = true;
        SuiteResult r = e.run();
        out << (r.pass ? "PASS" : "FAIL") << "  " << e.name << ": " << r.detail << "\n";
        ok = ok && r.pass;
    }
    if (!any) {
        out << "unknown suite: " << suite
            << " (expected collapse|thm1|thm2|thm3|thm4|thm5|reprthm|gradcheck|all)\n";
        return 1;
    }
    return ok ? 0 : 1;
}

int cmd_landscape(const std::string& which, const std::string& out_path, std::ostream& out) {
    LandscapeRequest req;
    if (which == "mp") req = landscape_mp_example();
    else if (which == "hybrid") req = landscape_hybrid_example();
    else {
        out << "unknown landscape preset: " << which << " (expected mp|hybrid)\n";
        return 1;
    }
    Tensor grid = landscape_grid(req);
    std::ofstream f(out_path);
    if (!f) throw IoError("cannot write " + out_path);
    f << landscape_csv(req, grid);
    out << "wrote " << req.n1 << "x" << req.n2 << " loss grid to " << out_path << " ("
        << count_local_minima(grid) << " grid-local minima)\n";
    return 0;
}

int cmd_regress(const RunConfig& cfg, bool activated, std::ostream& out) {
    RegressionFn fn;
    if (cfg.dataset == "synth:sin6") fn = RegressionFn::SIN6;
    else if (cfg.dataset == "synth:square") fn = RegressionFn::SQUARE;
    else if (cfg.dataset == "synth:lin20") fn = RegressionFn::LIN20;
    else {
        out << "regress expects dataset synth:sin6|square|lin20, got " << cfg.dataset << "\n";
        return 1;
    }
    RegressResult r = regress_run(fn, activated, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed);
    out << "train mse " << r.train_mse << ", held-out mse " << r.test_mse << "\n";
    return 0;
}

int cmd_meanshift(const std::string& model, std::size_t batch, std::size_t epochs, double lr,
                  std::uint64_t seed, const std::string& out_path, std::ostream& out) {
    MeanShiftModel m;
    if (model == "linear") m = MeanShiftModel::LINEAR;
    else if (model == "mp") m = MeanShiftModel::MP;
    else {
        out << "unknown mean-shift model: " << model << " (expected linear|mp)\n";
        return 1;
    }
    MeanShiftResult r = mean_shift_run(m, batch, epochs, lr, seed);
    std::ofstream f(out_path);
    if (!f) throw IoError("cannot write " + out_path);
    f << mean_shift_csv(r);
    out << "final weight mean " << r.final_mean << ", std " << r.final_std << " -> " << out_path
        << "\n";
    return 0;
}

} // namespace morphnn
