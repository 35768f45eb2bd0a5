#include "morphnn/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace morphnn {

using nlohmann::json;

namespace {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::MP: return "mp";
        case LayerKind::DEP: return "dep";
        case LayerKind::MPM: return "mpm";
        case LayerKind::RMPM: return "rmpm";
        case LayerKind::MPM_SVD: return "mpm_svd";
        case LayerKind::LINEAR: return "linear";
        case LayerKind::HYBRID_BLOCK: return "hybrid_block";
        case LayerKind::MORPH_CONV_S1: return "morph_conv_s1";
        case LayerKind::MORPH_CONV_S2: return "morph_conv_s2";
        case LayerKind::RELU: return "relu";
        case LayerKind::MAXOUT: return "maxout";
        case LayerKind::LINEAR_CONV: return "linear_conv";
        case LayerKind::MAXPOOL: return "maxpool";
        case LayerKind::FLATTEN: return "flatten";
    }
    throw ValueError("unknown layer kind");
}

LayerKind kind_from(const std::string& s) {
    static const std::map<std::string, LayerKind> table = {
        {"mp", LayerKind::MP},
        {"dep", LayerKind::DEP},
        {"mpm", LayerKind::MPM},
        {"rmpm", LayerKind::RMPM},
        {"mpm_svd", LayerKind::MPM_SVD},
        {"linear", LayerKind::LINEAR},
        {"hybrid_block", LayerKind::HYBRID_BLOCK},
        {"morph_conv_s1", LayerKind::MORPH_CONV_S1},
        {"morph_conv_s2", LayerKind::MORPH_CONV_S2},
        {"relu", LayerKind::RELU},
        {"maxout", LayerKind::MAXOUT},
        {"linear_conv", LayerKind::LINEAR_CONV},
        {"maxpool", LayerKind::MAXPOOL},
        {"flatten", LayerKind::FLATTEN},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ValueError("unknown layer kind: " + s);
    return it->second;
}

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::None: return "none";
        case Activation::Scale: return "scale";
        case Activation::Svd: return "svd";
        case Activation::Sigmoid: return "sigmoid";
    }
    throw ValueError("unknown activation");
}

Activation activation_from(const std::string& s) {
    if (s == "none") return Activation::None;
    if (s == "scale") return Activation::Scale;
    if (s == "svd") return Activation::Svd;
    if (s == "sigmoid") return Activation::Sigmoid;
    throw ValueError("unknown activation: " + s);
}

const char* role_name(ParamRole r) {
    switch (r) {
        case ParamRole::LinearWeight: return "linear_weight";
        case ParamRole::TropicalShared: return "tropical_shared";
        case ParamRole::TropicalMax: return "tropical_max";
        case ParamRole::TropicalMin: return "tropical_min";
        case ParamRole::Bias: return "bias";
        case ParamRole::Activation: return "activation";
        case ParamRole::Lambda: return "lambda";
        case ParamRole::Frame: return "frame";
    }
    throw ValueError("unknown role");
}

ParamRole role_from(const std::string& s) {
    static const std::map<std::string, ParamRole> table = {
        {"linear_weight", ParamRole::LinearWeight},
        {"tropical_shared", ParamRole::TropicalShared},
        {"tropical_max", ParamRole::TropicalMax},
        {"tropical_min", ParamRole::TropicalMin},
        {"bias", ParamRole::Bias},
        {"activation", ParamRole::Activation},
        {"lambda", ParamRole::Lambda},
        {"frame", ParamRole::Frame},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ValueError("unknown parameter role: " + s);
    return it->second;
}

} // namespace

std::string spec_to_json(const NetworkSpec& spec) {
    json doc;
    doc["version"] = 1;
    doc["input_shape"] = spec.input_shape;
    doc["output_size"] = spec.output_size;
    doc["layers"] = json::array();
    for (const LayerSpec& l : spec.layers) {
        json j;
        j["kind"] = kind_name(l.kind);
        j["n_in"] = l.n_in;
        j["n_out"] = l.n_out;
        j["in_ch"] = l.in_ch;
        j["out_ch"] = l.out_ch;
        j["kh"] = l.kh;
        j["kw"] = l.kw;
        j["padding"] = l.padding;
        j["stride"] = l.stride;
        j["lambda_mode"] = {{"learnable", l.lambda_mode.learnable}, {"fixed", l.lambda_mode.fixed}};
        j["activation"] = activation_name(l.activation);
        j["residual"] = l.residual;
        j["is_output_layer"] = l.is_output_layer;
        j["dropout_rate"] = l.dropout_rate;
        j["bias"] = l.bias;
        j["mode"] = l.mode == TropicalMode::MAX_PLUS ? "max_plus" : "min_plus";
        j["pool"] = l.pool;
        j["n_mid"] = l.n_mid;
        doc["layers"].push_back(std::move(j));
    }
    return doc.dump(2);
}

NetworkSpec spec_from_json(const std::string& text) {
    json doc = json::parse(text);
    if (doc.value("version", 0) != 1) throw IoError("unsupported spec version");
    NetworkSpec spec;
    spec.input_shape = doc.at("input_shape").get<std::vector<std::size_t>>();
    spec.output_size = doc.at("output_size").get<std::size_t>();
    for (const json& j : doc.at("layers")) {
        LayerSpec l;
        l.kind = kind_from(j.at("kind").get<std::string>());
        l.n_in = j.value("n_in", 0u);
        l.n_out = j.value("n_out", 0u);
        l.in_ch = j.value("in_ch", 0u);
        l.out_ch = j.value("out_ch", 0u);
        l.kh = j.value("kh", 0u);
        l.kw = j.value("kw", 0u);
        l.padding = j.value("padding", 0);
        l.stride = j.value("stride", 1);
        if (j.contains("lambda_mode")) {
            l.lambda_mode.learnable = j["lambda_mode"].value("learnable", true);
            l.lambda_mode.fixed = j["lambda_mode"].value("fixed", 0.5);
        }
        l.activation = activation_from(j.value("activation", std::string("none")));
        l.residual = j.value("residual", false);
        l.is_output_layer = j.value("is_output_layer", false);
        l.dropout_rate = j.value("dropout_rate", 0.0);
        l.bias = j.value("bias", true);
        l.mode = j.value("mode", std::string("max_plus")) == "min_plus"
                     ? TropicalMode::MIN_PLUS
                     : TropicalMode::MAX_PLUS;
        l.pool = j.value("pool", 2u);
        l.n_mid = j.value("n_mid", 0u);
        spec.layers.push_back(l);
    }
    spec.validate();
    return spec;
}

void save_checkpoint(const std::string& dir, const NetworkSpec& spec, const ParamSet& params) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream f(dir + "/spec.json");
        if (!f) throw IoError("cannot write " + dir + "/spec.json");
        f << spec_to_json(spec);
    }
    json manifest;
    manifest["version"] = 1;
    manifest["dtype"] = "f64le";
    manifest["params"] = json::array();
    std::ofstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw IoError("cannot write " + dir + "/params.bin");
    std::size_t offset = 0;
    auto dump = [&](const Tensor& t) {
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)));
        std::size_t at = offset;
        offset += t.size() * sizeof(double);
        return at;
    };
    for (const auto& [id, p] : params) {
        json j;
        j["id"] = id;
        j["shape"] = p.value.shape();
        j["role"] = role_name(p.role);
        j["trainable"] = p.trainable;
        j["offset"] = dump(p.value);
        j["mask_offset"] = p.mask ? static_cast<long long>(dump(*p.mask)) : -1;
        manifest["params"].push_back(std::move(j));
    }
    manifest["blob_size"] = offset;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write " + dir + "/manifest.json");
    f << manifest.dump(2);
}

std::pair<NetworkSpec, ParamSet> load_checkpoint(const std::string& dir) {
    auto slurp = [](const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open " + path);
        return std::string((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
    };
    NetworkSpec spec = spec_from_json(slurp(dir + "/spec.json"));
    json manifest = json::parse(slurp(dir + "/manifest.json"));
    std::string blob = slurp(dir + "/params.bin");
    if (manifest.value("blob_size", std::size_t(0)) != blob.size())
        throw IoError("parameter blob size does not match manifest");

    ParamSet params;
    auto read_tensor = [&](std::size_t offset, const std::vector<std::size_t>& shape) {
        std::size_t n = Tensor::count(shape);
        if (offset + n * sizeof(double) > blob.size())
            throw IoError("parameter blob truncated");
        Tensor t(shape);
        std::memcpy(t.data(), blob.data() + offset, n * sizeof(double));
        return t;
    };
    for (const json& j : manifest.at("params")) {
        auto shape = j.at("shape").get<std::vector<std::size_t>>();
        Parameter p(j.at("id").get<std::string>(), read_tensor(j.at("offset"), shape),
                    role_from(j.at("role").get<std::string>()), j.value("trainable", true));
        long long mask_off = j.value("mask_offset", -1ll);
        if (mask_off >= 0)
            p.mask = read_tensor(static_cast<std::size_t>(mask_off), shape);
        params.add(std::move(p));
    }
    return {std::move(spec), std::move(params)};
}

} // namespace morphnn
