#include "danp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace danp {

using nlohmann::json;

void RunConfig::validate() const {
    model.validate();
    train.validate();
    Scenario(scenario, 0);
}

namespace {

json dims_json(const std::vector<std::size_t>& v) { return json(v); }

}  // namespace

json run_config_to_json(const RunConfig& c) {
    const ModelConfig& m = c.model;
    json model = {
        {"d_r", m.d_r},
        {"enable_dab", m.enable_dab},
        {"enable_latent", m.enable_latent},
        {"positional_encoding", m.positional_encoding == PositionalEncoding::sinusoidal ? "sinusoidal" : "none"},
        {"pooling", m.pooling == Pooling::mean ? "mean" : "pma"},
        {"target_self_attend", m.target_self_attend},
        {"det_hidden", m.det_hidden},
        {"det_layers", m.det_layers},
        {"det_heads", m.det_heads},
        {"lat_hidden", m.lat_hidden},
        {"lat_layers", m.lat_layers},
        {"lat_mlp_hidden", m.lat_mlp_hidden},
        {"lat_mlp_layers", m.lat_mlp_layers},
        {"decoder_depth", m.decoder_depth},
        {"min_std", m.min_std},
        {"fixed_dims", m.fixed_dims ? json{{"d_x", m.fixed_dims->d_x}, {"d_y", m.fixed_dims->d_y}} : json(nullptr)},
    };
    const TrainSpec& t = c.train;
    json train = {
        {"total_steps", t.total_steps},
        {"batch_size", t.batch_size},
        {"base_lr", t.base_lr},
        {"weight_decay", t.weight_decay},
        {"clip_norm", t.clip_norm},
        {"seed", t.seed},
        {"elbo_latent_samples", t.elbo_latent_samples},
        {"eval_latent_samples", t.eval_latent_samples},
    };
    const ScenarioParams& s = c.scenario;
    json kernels = json::array();
    for (auto f : s.families) kernels.push_back(kernel_family_name(f));
    json scenario = {
        {"name", scenario_kind_name(s.kind)},
        {"train_dims", dims_json(s.train_dims)},
        {"eval_dims", dims_json(s.eval_dims)},
        {"d_y", s.d_y},
        {"kernels", kernels},
        {"finetune_tasks", s.finetune_tasks},
        {"eval_tasks", s.eval_tasks},
        {"noise_std", s.noise_std},
    };
    return json{{"model", model}, {"train", train}, {"scenario", scenario}, {"io", {{"curve", c.io.curve}}}};
}

namespace {

class Reader {
  public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
    }

    void check_keys(std::initializer_list<const char*> allowed) const {
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [key, _] : j_.items())
            if (!ok.count(key)) throw ConfigError(field(key), "unknown key");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const char* key) const { return j_.contains(key); }
    const json& at(const char* key) const { return j_.at(key); }

    template <typename U>
    void count(const char* key, U& out) const {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw ConfigError(field(key), "expected a non-negative integer");
        out = v.get<U>();
    }
    void real(const char* key, double& out) const {
        if (!has(key)) return;
        if (!j_.at(key).is_number()) throw ConfigError(field(key), "expected a number");
        out = j_.at(key).get<double>();
    }
    void boolean(const char* key, bool& out) const {
        if (!has(key)) return;
        if (!j_.at(key).is_boolean()) throw ConfigError(field(key), "expected true or false");
        out = j_.at(key).get<bool>();
    }
    void string(const char* key, std::string& out) const {
        if (!has(key)) return;
        if (!j_.at(key).is_string()) throw ConfigError(field(key), "expected a string");
        out = j_.at(key).get<std::string>();
    }
    void dims(const char* key, std::vector<std::size_t>& out) const {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_array()) throw ConfigError(field(key), "expected an array of positive integers");
        out.clear();
        for (const auto& e : v) {
            if (!e.is_number_integer() || e.get<std::int64_t>() <= 0)
                throw ConfigError(field(key), "expected an array of positive integers");
            out.push_back(e.get<std::size_t>());
        }
    }

  private:
    const json& j_;
    std::string path_;
};

ModelConfig model_from(const json& j) {
    Reader r(j, "model");
    r.check_keys({"d_r", "enable_dab", "enable_latent", "positional_encoding", "pooling", "target_self_attend",
                  "det_hidden", "det_layers", "det_heads", "lat_hidden", "lat_layers", "lat_mlp_hidden",
                  "lat_mlp_layers", "decoder_depth", "min_std", "fixed_dims"});
    ModelConfig m;
    r.count("d_r", m.d_r);
    r.boolean("enable_dab", m.enable_dab);
    r.boolean("enable_latent", m.enable_latent);
    std::string pe = "sinusoidal", pool = "mean";
    r.string("positional_encoding", pe);
    if (pe == "sinusoidal") m.positional_encoding = PositionalEncoding::sinusoidal;
    else if (pe == "none") m.positional_encoding = PositionalEncoding::none;
    else throw ConfigError("model.positional_encoding", "expected 'sinusoidal' or 'none'");
    r.string("pooling", pool);
    if (pool == "mean") m.pooling = Pooling::mean;
    else if (pool == "pma") m.pooling = Pooling::pma;
    else throw ConfigError("model.pooling", "expected 'mean' or 'pma'");
    r.boolean("target_self_attend", m.target_self_attend);
    r.count("det_hidden", m.det_hidden);
    r.count("det_layers", m.det_layers);
    r.count("det_heads", m.det_heads);
    r.count("lat_hidden", m.lat_hidden);
    r.count("lat_layers", m.lat_layers);
    r.count("lat_mlp_hidden", m.lat_mlp_hidden);
    r.count("lat_mlp_layers", m.lat_mlp_layers);
    r.count("decoder_depth", m.decoder_depth);
    r.real("min_std", m.min_std);
    if (r.has("fixed_dims") && !r.at("fixed_dims").is_null()) {
        Reader f(r.at("fixed_dims"), "model.fixed_dims");
        f.check_keys({"d_x", "d_y"});
        FixedDims d;
        f.count("d_x", d.d_x);
        f.count("d_y", d.d_y);
        m.fixed_dims = d;
    }
    return m;
}

TrainSpec train_from(const json& j) {
    Reader r(j, "train");
    r.check_keys({"total_steps", "batch_size", "base_lr", "weight_decay", "clip_norm", "seed", "elbo_latent_samples",
                  "eval_latent_samples"});
    TrainSpec t;
    r.count("total_steps", t.total_steps);
    r.count("batch_size", t.batch_size);
    r.real("base_lr", t.base_lr);
    r.real("weight_decay", t.weight_decay);
    r.real("clip_norm", t.clip_norm);
    r.count("seed", t.seed);
    r.count("elbo_latent_samples", t.elbo_latent_samples);
    r.count("eval_latent_samples", t.eval_latent_samples);
    return t;
}

ScenarioParams scenario_from(const json& j) {
    Reader r(j, "scenario");
    r.check_keys({"name", "train_dims", "eval_dims", "d_y", "kernels", "finetune_tasks", "eval_tasks", "noise_std"});
    ScenarioParams s;
    std::string name = scenario_kind_name(s.kind);
    r.string("name", name);
    s.kind = parse_scenario_kind(name);
    r.dims("train_dims", s.train_dims);
    r.dims("eval_dims", s.eval_dims);
    r.count("d_y", s.d_y);
    if (r.has("kernels")) {
        const json& k = r.at("kernels");
        if (!k.is_array()) throw ConfigError("scenario.kernels", "expected an array of kernel names");
        s.families.clear();
        for (const auto& e : k) {
            if (!e.is_string()) throw ConfigError("scenario.kernels", "expected an array of kernel names");
            try {
                s.families.push_back(parse_kernel_family(e.get<std::string>()));
            } catch (const ConfigError& err) {
                throw ConfigError("scenario.kernels", err.what());
            }
        }
    }
    r.count("finetune_tasks", s.finetune_tasks);
    r.count("eval_tasks", s.eval_tasks);
    r.real("noise_std", s.noise_std);
    return s;
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
    Reader r(j, "");
    r.check_keys({"model", "train", "scenario", "io"});
    RunConfig c;
    if (r.has("model")) c.model = model_from(r.at("model"));
    if (r.has("train")) c.train = train_from(r.at("train"));
    if (r.has("scenario")) c.scenario = scenario_from(r.at("scenario"));
    if (r.has("io")) {
        Reader io(r.at("io"), "io");
        io.check_keys({"curve"});
        io.string("curve", c.io.curve);
    }
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
        j = json::parse(buf.str());
    } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string(e.what()));
    }
    return run_config_from_json(j);
}

}  // namespace danp
