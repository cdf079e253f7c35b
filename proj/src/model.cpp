#include "danp/model.hpp"

#include <cmath>
#include <string>

namespace danp {

void ModelConfig::validate() const {
    if (d_r == 0 || d_r % 2 != 0) throw ConfigError("d_r", "must be a positive even number");
    if (det_heads == 0) throw ConfigError("det_heads", "must be positive");
    if (d_r % det_heads != 0) throw ConfigError("det_heads", "must divide d_r");
    if (token_width() % det_heads != 0) throw ConfigError("det_heads", "must divide 2*d_r");
    if (det_hidden == 0 || det_hidden % det_heads != 0)
        throw ConfigError("det_hidden", "must be positive and divisible by det_heads");
    if (det_layers == 0) throw ConfigError("det_layers", "must be positive");
    if (enable_latent) {
        if (lat_hidden == 0 || lat_hidden % det_heads != 0)
            throw ConfigError("lat_hidden", "must be positive and divisible by det_heads");
        if (lat_mlp_hidden == 0) throw ConfigError("lat_mlp_hidden", "must be positive");
    }
    if (decoder_depth == 0) throw ConfigError("decoder_depth", "must be positive");
    if (!(min_std > 0.0) || !std::isfinite(min_std)) throw ConfigError("min_std", "must be positive");
    if (!enable_dab) {
        if (!fixed_dims) throw ConfigError("fixed_dims", "required when enable_dab is false");
        if (fixed_dims->d_x == 0 || fixed_dims->d_y == 0) throw ConfigError("fixed_dims", "dims must be positive");
    }
}

ModelConfig tnp_config(ModelConfig base, FixedDims dims) {
    base.enable_dab = false;
    base.enable_latent = false;
    base.fixed_dims = dims;
    return base;
}

void check_task_compatible(const TaskBatch& task, const ModelConfig& config) {
    task.validate();
    if (!config.enable_dab) {
        const auto& fd = *config.fixed_dims;
        if (task.d_x != fd.d_x || task.d_y != fd.d_y)
            throw DimensionMismatchError("model is fixed to d_x=" + std::to_string(fd.d_x) + ", d_y=" +
                                         std::to_string(fd.d_y) + " but the task has d_x=" + std::to_string(task.d_x) +
                                         ", d_y=" + std::to_string(task.d_y));
    }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

enum class Init { weight, bias, one, zero, unit };

struct ParamSpec {
    std::string key;
    Shape shape;
    Init init;
    std::size_t fan_in;
};

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t width) {
    out.push_back({prefix + ".w", {in, width}, Init::weight, in});
    out.push_back({prefix + ".b", {width}, Init::bias, in});
}

void add_mha(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width) {
    for (const char* p : {"q", "k", "v", "o"}) {
        out.push_back({prefix + ".w" + p, {width, width}, Init::weight, width});
        out.push_back({prefix + ".b" + p, {width}, Init::bias, width});
    }
}

void add_ln(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width) {
    out.push_back({prefix + ".g", {width}, Init::one, width});
    out.push_back({prefix + ".b", {width}, Init::zero, width});
}

void add_block(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width, std::size_t ff) {
    add_ln(out, prefix + ".ln1", width);
    add_mha(out, prefix + ".attn", width);
    add_ln(out, prefix + ".ln2", width);
    add_linear(out, prefix + ".ff1", width, ff);
    add_linear(out, prefix + ".ff2", ff, width);
}

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
    std::vector<ParamSpec> out;
    const std::size_t tw = c.token_width();
    if (c.enable_dab) {
        out.push_back({"dab.proj.w", {1, c.d_r}, Init::weight, 1});
        add_mha(out, "dab.attn", c.d_r);
        if (c.pooling == Pooling::pma) {
            out.push_back({"dab.pma.seed", {1, c.d_r}, Init::weight, c.d_r});
            add_mha(out, "dab.pma.attn", c.d_r);
        }
    } else {
        const auto& fd = *c.fixed_dims;
        add_linear(out, "embed.l0", fd.d_x + fd.d_y, tw);
        add_linear(out, "embed.l1", tw, tw);
        out.push_back({"embed.dim", {fd.d_y, tw}, Init::weight, tw});
    }
    for (std::size_t i = 0; i < c.det_layers; ++i) add_block(out, "det.layer" + std::to_string(i), tw, c.det_hidden);
    add_ln(out, "det.ln_f", tw);
    const std::size_t lw = c.latent_width();
    if (c.enable_latent) {
        add_linear(out, "lat.in", tw, lw);
        for (std::size_t i = 0; i < c.lat_layers; ++i) add_block(out, "lat.layer" + std::to_string(i), lw, lw);
        add_ln(out, "lat.ln_f", lw);
        add_mha(out, "lat.sa", lw);
        std::size_t in = lw;
        for (std::size_t i = 0; i < c.lat_mlp_layers; ++i) {
            add_linear(out, "lat.mlp.l" + std::to_string(i), in, c.lat_mlp_hidden);
            in = c.lat_mlp_hidden;
        }
        add_linear(out, "lat.mlp.out", in, 2 * lw);
    }
    const std::size_t first_out = c.decoder_depth == 1 ? 2 : c.det_hidden;
    out.push_back({"dec.l0.w_det", {tw, first_out}, Init::weight, tw + (c.enable_latent ? lw : 0)});
    if (c.enable_latent) out.push_back({"dec.l0.w_lat", {lw, first_out}, Init::weight, tw + lw});
    out.push_back({"dec.l0.b", {first_out}, Init::bias, tw + (c.enable_latent ? lw : 0)});
    for (std::size_t i = 1; i < c.decoder_depth; ++i) {
        const std::size_t width = i + 1 == c.decoder_depth ? 2 : c.det_hidden;
        add_linear(out, "dec.l" + std::to_string(i), c.det_hidden, width);
    }
    return out;
}

std::uint64_t key_hash(const std::string& key) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : key) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ParamStore<T> store;
    for (const auto& spec : param_specs(config)) {
        Tensor<T> t(spec.shape);
        Rng rng(derive_seed(seed, key_hash(spec.key)));
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (std::size_t i = 0; i < t.numel(); ++i) {
            switch (spec.init) {
                case Init::weight:
                case Init::bias: t[i] = static_cast<T>(rng.uniform(-bound, bound)); break;
                case Init::one: t[i] = T{1}; break;
                case Init::zero: t[i] = T{0}; break;
                case Init::unit: t[i] = static_cast<T>(rng.uniform(-1.0, 1.0)); break;
            }
        }
        store.insert(spec.key, std::move(t));
    }
    return store;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> positional_encoding(std::size_t d_x, std::size_t d_y, std::size_t d_r) {
    if (d_r == 0 || d_r % 2 != 0) throw ConfigError("d_r", "positional encoding needs an even width");
    if (d_x == 0 || d_y == 0) throw MalformedTaskError("positional encoding needs positive dims");
    Tensor<T> pex({d_x, d_r}), pey({d_y, d_r});
    for (std::size_t i = 0; i < d_r / 2; ++i) {
        const double period = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_r));
        for (std::size_t j = 1; j <= d_x; ++j) {
            const double a = static_cast<double>(j) / period;
            pex.at(j - 1, 2 * i) = static_cast<T>(std::sin(a));
            pex.at(j - 1, 2 * i + 1) = static_cast<T>(std::cos(a));
        }
        for (std::size_t l = 1; l <= d_y; ++l) {
            const double a = static_cast<double>(l) / period;
            pey.at(l - 1, 2 * i) = static_cast<T>(std::cos(a));
            pey.at(l - 1, 2 * i + 1) = static_cast<T>(std::sin(a));
        }
    }
    return {std::move(pex), std::move(pey)};
}

AttentionMask build_mask(std::size_t n, std::size_t d_y, const std::vector<std::size_t>& context,
                         bool target_self_attend) {
    if (context.empty()) throw ContractError("build_mask: empty context leaves every target as an isolated query");
    std::vector<bool> in_context(n, false);
    for (auto k : context) {
        if (k >= n) throw ContractError("build_mask: context index out of range");
        in_context[k] = true;
    }
    const std::size_t tokens = n * d_y;
    AttentionMask mask(tokens, tokens);
    for (std::size_t k1 = 0; k1 < n; ++k1) {
        for (std::size_t l1 = 0; l1 < d_y; ++l1) {
            const std::size_t row = k1 * d_y + l1;
            for (auto k2 : context)
                for (std::size_t l2 = 0; l2 < d_y; ++l2) mask.set(row, k2 * d_y + l2, true);
            if (target_self_attend && !in_context[k1]) mask.set(row, row, true);
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
DanpGraph<T>::DanpGraph(const ModelConfig& config, const ParamStore<T>& params, bool trainable)
    : config_(config), binding_(tape_, params, trainable) {}

template <typename T>
Var<T> DanpGraph<T>::linear(Var<T> x, const std::string& prefix) {
    return ops::add_row(ops::matmul(x, binding_(prefix + ".w")), binding_(prefix + ".b"));
}

template <typename T>
Var<T> DanpGraph<T>::mha(Var<T> q_in, Var<T> kv_in, const std::string& prefix, std::size_t heads,
                         const AttentionMask* mask) {
    auto proj = [&](Var<T> x, const char* p) {
        return ops::add_row(ops::matmul(x, binding_(prefix + ".w" + p)), binding_(prefix + ".b" + p));
    };
    Var<T> q = proj(q_in, "q");
    Var<T> k = proj(kv_in, "k");
    Var<T> v = proj(kv_in, "v");
    return proj(ops::attention(q, k, v, heads, mask), "o");
}

template <typename T>
Var<T> DanpGraph<T>::transformer_block(Var<T> x, const std::string& prefix, std::size_t heads,
                                       const AttentionMask* mask) {
    Var<T> h = ops::layer_norm(x, binding_(prefix + ".ln1.g"), binding_(prefix + ".ln1.b"));
    x = ops::add(x, mha(h, h, prefix + ".attn", heads, mask));
    h = ops::layer_norm(x, binding_(prefix + ".ln2.g"), binding_(prefix + ".ln2.b"));
    return ops::add(x, linear(ops::gelu(linear(h, prefix + ".ff1")), prefix + ".ff2"));
}

template <typename T>
DabEncoding<T> DanpGraph<T>::dab_encode(const TaskBatch& task, const std::vector<std::size_t>& points,
                                        const std::vector<bool>& hide_label) {
    if (!config_.enable_dab) throw ContractError("dab_encode requires enable_dab");
    if (task.d_x == 0 || task.d_y == 0) throw MalformedTaskError("DAB needs d_x >= 1 and d_y >= 1");
    if (points.empty()) throw MalformedTaskError("DAB needs at least one point");
    const std::size_t dx = task.d_x, dy = task.d_y, slots = dx + dy, d_r = config_.d_r;
    const std::size_t np = points.size();

    Tensor<T> values({np * slots, 1});
    for (std::size_t p = 0; p < np; ++p) {
        const std::size_t k = points[p];
        for (std::size_t j = 0; j < dx; ++j) values[p * slots + j] = static_cast<T>(task.x[k * dx + j]);
        for (std::size_t l = 0; l < dy; ++l)
            values[p * slots + dx + l] = hide_label[p] ? T{0} : static_cast<T>(task.y[k * dy + l]);
    }
    Var<T> h = ops::matmul(tape_.constant(std::move(values)), binding_("dab.proj.w"));
    if (config_.positional_encoding == PositionalEncoding::sinusoidal) {
        auto [pex, pey] = positional_encoding<T>(dx, dy, d_r);
        Tensor<T> pe({np * slots, d_r});
        for (std::size_t p = 0; p < np; ++p) {
            for (std::size_t j = 0; j < dx; ++j)
                for (std::size_t c = 0; c < d_r; ++c) pe.at(p * slots + j, c) = pex.at(j, c);
            for (std::size_t l = 0; l < dy; ++l)
                for (std::size_t c = 0; c < d_r; ++c) pe.at(p * slots + dx + l, c) = pey.at(l, c);
        }
        h = ops::add(h, tape_.constant(std::move(pe)));
    }

    auto proj = [&](Var<T> x, const char* p) {
        return ops::add_row(ops::matmul(x, binding_(std::string("dab.attn.w") + p)),
                            binding_(std::string("dab.attn.b") + p));
    };
    Var<T> attn = ops::grouped_attention(proj(h, "q"), proj(h, "k"), proj(h, "v"), config_.det_heads, slots, slots);
    h = ops::add(h, proj(attn, "o"));

    std::vector<std::size_t> x_rows, y_rows;
    x_rows.reserve(np * dx);
    y_rows.reserve(np * dy);
    for (std::size_t p = 0; p < np; ++p) {
        for (std::size_t j = 0; j < dx; ++j) x_rows.push_back(p * slots + j);
        for (std::size_t l = 0; l < dy; ++l) y_rows.push_back(p * slots + dx + l);
    }
    Var<T> x_slots = ops::gather_rows(h, std::move(x_rows));
    Var<T> x_hat = config_.pooling == Pooling::pma ? pma_pool(x_slots, dx) : ops::segment_mean_rows(x_slots, dx);
    return {x_hat, ops::gather_rows(h, std::move(y_rows))};
}

template <typename T>
Var<T> DanpGraph<T>::pma_pool(Var<T> slots, std::size_t group) {
    if (group == 0 || slots.rows() % group != 0) throw DimensionError("pma_pool: slots do not split into groups");
    const std::size_t groups = slots.rows() / group;
    Var<T> seeds = ops::gather_rows(binding_("dab.pma.seed"), std::vector<std::size_t>(groups, 0));
    auto proj = [&](Var<T> x, const char* p) {
        return ops::add_row(ops::matmul(x, binding_(std::string("dab.pma.attn.w") + p)),
                            binding_(std::string("dab.pma.attn.b") + p));
    };
    Var<T> attn =
        ops::grouped_attention(proj(seeds, "q"), proj(slots, "k"), proj(slots, "v"), config_.det_heads, 1, group);
    return proj(attn, "o");
}

template <typename T>
Var<T> DanpGraph<T>::fixed_embedding(const TaskBatch& task, const std::vector<std::size_t>& points,
                                     const std::vector<bool>& hide_label) {
    const std::size_t dx = task.d_x, dy = task.d_y, np = points.size();
    Tensor<T> in({np, dx + dy});
    for (std::size_t p = 0; p < np; ++p) {
        const std::size_t k = points[p];
        for (std::size_t j = 0; j < dx; ++j) in.at(p, j) = static_cast<T>(task.x[k * dx + j]);
        for (std::size_t l = 0; l < dy; ++l) in.at(p, dx + l) = hide_label[p] ? T{0} : static_cast<T>(task.y[k * dy + l]);
    }
    Var<T> e = linear(ops::relu(linear(tape_.constant(std::move(in)), "embed.l0")), "embed.l1");
    std::vector<std::size_t> point_rows, dim_rows;
    for (std::size_t p = 0; p < np; ++p)
        for (std::size_t l = 0; l < dy; ++l) {
            point_rows.push_back(p);
            dim_rows.push_back(l);
        }
    return ops::add(ops::gather_rows(e, std::move(point_rows)),
                    ops::gather_rows(binding_("embed.dim"), std::move(dim_rows)));
}

template <typename T>
Var<T> DanpGraph<T>::tokens(const TaskBatch& task, const std::vector<std::size_t>& points,
                            const std::vector<bool>& hide_label) {
    if (!config_.enable_dab) return fixed_embedding(task, points, hide_label);
    DabEncoding<T> enc = dab_encode(task, points, hide_label);
    std::vector<std::size_t> rep;
    rep.reserve(points.size() * task.d_y);
    for (std::size_t p = 0; p < points.size(); ++p)
        for (std::size_t l = 0; l < task.d_y; ++l) rep.push_back(p);
    return ops::concat_cols(ops::gather_rows(enc.x_hat, std::move(rep)), enc.y_slots);
}

template <typename T>
Var<T> DanpGraph<T>::deterministic_path(Var<T> tokens, const AttentionMask& mask) {
    Var<T> x = tokens;
    for (std::size_t i = 0; i < config_.det_layers; ++i)
        x = transformer_block(x, "det.layer" + std::to_string(i), config_.det_heads, &mask);
    return ops::layer_norm(x, binding_("det.ln_f.g"), binding_("det.ln_f.b"));
}

template <typename T>
LatentStats<T> DanpGraph<T>::latent_path(Var<T> context_tokens) {
    if (!config_.enable_latent) throw ContractError("latent_path requires enable_latent");
    Var<T> x = linear(context_tokens, "lat.in");
    for (std::size_t i = 0; i < config_.lat_layers; ++i)
        x = transformer_block(x, "lat.layer" + std::to_string(i), config_.det_heads, nullptr);
    x = ops::layer_norm(x, binding_("lat.ln_f.g"), binding_("lat.ln_f.b"));
    x = ops::add(x, mha(x, x, "lat.sa", config_.det_heads, nullptr));
    Var<T> h = ops::mean_rows(x);
    for (std::size_t i = 0; i < config_.lat_mlp_layers; ++i) h = ops::relu(linear(h, "lat.mlp.l" + std::to_string(i)));
    Var<T> out = linear(h, "lat.mlp.out");
    const std::size_t lw = config_.latent_width();
    Var<T> m = ops::slice_cols(out, 0, lw);
    // s = 1e-3 + exp(raw / 2), variance = s^2
    Var<T> s = ops::add_scalar(ops::exp(ops::scale(ops::slice_cols(out, lw, lw), T(0.5))), T(1e-3));
    return {m, ops::square(s)};
}

template <typename T>
Var<T> DanpGraph<T>::sample_latent(const LatentStats<T>& stats, Rng& rng) {
    const std::size_t lw = stats.mean.value().numel();
    Tensor<T> eps({1, lw});
    for (std::size_t i = 0; i < lw; ++i) eps[i] = static_cast<T>(rng.normal());
    Var<T> s = ops::exp(ops::scale(ops::log(stats.variance), T(0.5)));
    return ops::add(stats.mean, ops::mul(s, tape_.constant(std::move(eps))));
}

template <typename T>
Var<T> DanpGraph<T>::decoder_det_part(Var<T> r_det) {
    return ops::matmul(r_det, binding_("dec.l0.w_det"));
}

template <typename T>
Var<T> DanpGraph<T>::decode(Var<T> det_part, std::optional<Var<T>> r_lat) {
    if (r_lat.has_value() != config_.enable_latent)
        throw ContractError("decode: latent sample must be given iff the latent path is enabled");
    Var<T> bias = binding_("dec.l0.b");
    if (r_lat) {
        Var<T> lat = ops::matmul(*r_lat, binding_("dec.l0.w_lat"));
        bias = ops::add(ops::reshape(lat, bias.shape()), bias);
    }
    Var<T> h = ops::add_row(det_part, bias);
    for (std::size_t i = 1; i < config_.decoder_depth; ++i) h = linear(ops::relu(h), "dec.l" + std::to_string(i));
    Var<T> mu = ops::slice_cols(h, 0, 1);
    Var<T> sd = ops::add_scalar(ops::softplus(ops::slice_cols(h, 1, 1)), static_cast<T>(config_.min_std));
    return ops::concat_cols(mu, sd);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

std::vector<bool> hidden_targets(const TaskBatch& task) {
    auto flags = task.context_flags();
    std::vector<bool> hide(flags.size());
    for (std::size_t k = 0; k < flags.size(); ++k) hide[k] = !flags[k];
    return hide;
}

template <typename T>
PredictiveDistribution<T> unpack(const Tensor<T>& out, const TaskBatch& task) {
    const std::size_t n = task.n(), dy = task.d_y;
    PredictiveDistribution<T> pd{Tensor<T>({n, dy}), Tensor<T>({n, dy}), std::nullopt};
    for (std::size_t t = 0; t < n * dy; ++t) {
        pd.mean[t] = out[t * 2];
        pd.std[t] = out[t * 2 + 1];
    }
    return pd;
}

}  // namespace

template <typename T>
std::vector<PredictiveDistribution<T>> predict_samples(const TaskBatch& task, const ParamStore<T>& params,
                                                       const ModelConfig& config, std::size_t samples, Rng& rng) {
    check_task_compatible(task, config);
    if (samples == 0) throw ContractError("predict_samples: need at least one sample");
    DanpGraph<T> graph(config, params, false);
    const std::size_t n = task.n(), dy = task.d_y;
    const auto context = task.sorted_context();
    Var<T> tokens = graph.tokens(task, iota(n), hidden_targets(task));
    Var<T> r_det = graph.deterministic_path(tokens, build_mask(n, dy, context, config.target_self_attend));
    Var<T> det_part = graph.decoder_det_part(r_det);

    std::vector<PredictiveDistribution<T>> out;
    if (!config.enable_latent) {
        out.push_back(unpack(graph.decode(det_part, std::nullopt).value(), task));
        return out;
    }
    std::vector<std::size_t> ctx_rows;
    for (auto k : context)
        for (std::size_t l = 0; l < dy; ++l) ctx_rows.push_back(k * dy + l);
    LatentStats<T> stats = graph.latent_path(ops::gather_rows(tokens, std::move(ctx_rows)));
    std::pair<Tensor<T>, Tensor<T>> latent_stats{stats.mean.value(), stats.variance.value()};
    for (std::size_t s = 0; s < samples; ++s) {
        Var<T> r_lat = graph.sample_latent(stats, rng);
        auto pd = unpack(graph.decode(det_part, r_lat).value(), task);
        pd.latent_stats = latent_stats;
        out.push_back(std::move(pd));
    }
    return out;
}

template <typename T>
PredictiveDistribution<T> forward(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                                  Rng& rng) {
    return std::move(predict_samples(task, params, config, 1, rng).front());
}

#define DANP_INSTANTIATE_MODEL(T)                                                                                \
    template class DanpGraph<T>;                                                                                \
    template ParamStore<T> init_params<T>(const ModelConfig&, std::uint64_t);                                  \
    template std::pair<Tensor<T>, Tensor<T>> positional_encoding<T>(std::size_t, std::size_t, std::size_t);    \
    template PredictiveDistribution<T> forward<T>(const TaskBatch&, const ParamStore<T>&, const ModelConfig&, \
                                                  Rng&);                                                        \
    template std::vector<PredictiveDistribution<T>> predict_samples<T>(const TaskBatch&, const ParamStore<T>&, \
                                                                       const ModelConfig&, std::size_t, Rng&);

DANP_INSTANTIATE_MODEL(float)
DANP_INSTANTIATE_MODEL(double)

#undef DANP_INSTANTIATE_MODEL

}  // namespace danp
