#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "danp/ops.hpp"
#include "danp/params.hpp"
#include "danp/rng.hpp"
#include "danp/task.hpp"

namespace danp {

/// Invalid configuration; field() names the offending key.
class ConfigError : public std::invalid_argument {
  public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

  private:
    std::string field_;
};

enum class PositionalEncoding { sinusoidal, none };
enum class Pooling { mean, pma };

struct FixedDims {
    std::size_t d_x = 1;
    std::size_t d_y = 1;
    friend bool operator==(const FixedDims&, const FixedDims&) = default;
};

/// Architecture toggles and widths. Defaults follow the full-size DANP:
/// d_r 32, masked transformer 6 x (FF 128, 4 heads), latent TL 2 x 64,
/// latent MLP 2 x 128, decoder depth 2, min std 0.1.
struct ModelConfig {
    std::size_t d_r = 32;
    bool enable_dab = true;
    bool enable_latent = true;
    PositionalEncoding positional_encoding = PositionalEncoding::sinusoidal;
    Pooling pooling = Pooling::mean;
    bool target_self_attend = false;
    std::size_t det_hidden = 128;  // feed-forward width; token width is 2*d_r
    std::size_t det_layers = 6;
    std::size_t det_heads = 4;
    std::size_t lat_hidden = 64;  // latent transformer width == latent dimension
    std::size_t lat_layers = 2;
    std::size_t lat_mlp_hidden = 128;
    std::size_t lat_mlp_layers = 2;
    std::size_t decoder_depth = 2;  // number of linear layers
    double min_std = 0.1;
    std::optional<FixedDims> fixed_dims;  // required when enable_dab is false

    std::size_t token_width() const { return 2 * d_r; }
    std::size_t latent_width() const { return lat_hidden; }

    /// Throws ConfigError naming the first bad field.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The TNP baseline: fixed-dimension embedding, no latent path.
ModelConfig tnp_config(ModelConfig base, FixedDims dims);

/// Per-point, per-output-dim Gaussian predictive. Latent statistics are
/// those of q(r | context) when the latent path is enabled.
template <typename T>
struct PredictiveDistribution {
    Tensor<T> mean;  // n x d_y
    Tensor<T> std;   // n x d_y
    std::optional<std::pair<Tensor<T>, Tensor<T>>> latent_stats;  // (m, s^2)
};

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Sinusoidal slot encodings with 1-based positions:
/// PEX[j, 2i] = sin(j / P(i)), PEX[j, 2i+1] = cos(j / P(i)),
/// PEY[l, 2i] = cos(l / P(i)), PEY[l, 2i+1] = sin(l / P(i)),
/// P(i) = 10000^(2i / d_r). Row j-1 holds position j.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> positional_encoding(std::size_t d_x, std::size_t d_y, std::size_t d_r);

/// Token (k, l) sits at k * d_y + l. Context tokens read every context
/// token; target tokens read context tokens (and themselves when
/// target_self_attend is set).
AttentionMask build_mask(std::size_t n, std::size_t d_y, const std::vector<std::size_t>& context,
                         bool target_self_attend = false);

/// Output of the dimension aggregator for a list of points.
template <typename T>
struct DabEncoding {
    Var<T> x_hat;    // points x d_r
    Var<T> y_slots;  // (points * d_y) x d_r, point-major
};

template <typename T>
struct LatentStats {
    Var<T> mean;      // 1 x latent
    Var<T> variance;  // 1 x latent
};

/// One forward graph over a single tape. Many graphs may read the same
/// ParamStore concurrently.
template <typename T>
class DanpGraph {
  public:
    /// trainable=false binds parameters as constants (inference).
    DanpGraph(const ModelConfig& config, const ParamStore<T>& params, bool trainable = true);

    Tape<T>& tape() { return tape_; }
    ParamBinding<T>& binding() { return binding_; }
    const ModelConfig& config() const { return config_; }

    /// DAB over `points` of the task; points with hide_label set get a
    /// zero label.
    DabEncoding<T> dab_encode(const TaskBatch& task, const std::vector<std::size_t>& points,
                              const std::vector<bool>& hide_label);

    /// Tokens for `points` in k-major order, width 2*d_r. Uses the DAB or
    /// the fixed embedding depending on the config.
    Var<T> tokens(const TaskBatch& task, const std::vector<std::size_t>& points, const std::vector<bool>& hide_label);

    Var<T> deterministic_path(Var<T> tokens, const AttentionMask& mask);
    LatentStats<T> latent_path(Var<T> context_tokens);
    /// Reparameterized draw m + s * eps with eps ~ N(0, I) from rng.
    Var<T> sample_latent(const LatentStats<T>& stats, Rng& rng);

    /// First decoder layer's contribution from r_det; reusable across
    /// latent samples.
    Var<T> decoder_det_part(Var<T> r_det);
    /// Returns [tokens x 2]: column 0 mean, column 1 std (>= min_std).
    Var<T> decode(Var<T> det_part, std::optional<Var<T>> r_lat);

    /// One learnable seed cross-attends over consecutive slot groups.
    Var<T> pma_pool(Var<T> slots, std::size_t group);

  private:
    Var<T> linear(Var<T> x, const std::string& prefix);
    Var<T> mha(Var<T> q_in, Var<T> kv_in, const std::string& prefix, std::size_t heads, const AttentionMask* mask);
    Var<T> transformer_block(Var<T> x, const std::string& prefix, std::size_t heads, const AttentionMask* mask);
    Var<T> fixed_embedding(const TaskBatch& task, const std::vector<std::size_t>& points,
                           const std::vector<bool>& hide_label);

    ModelConfig config_;
    Tape<T> tape_;
    ParamBinding<T> binding_;
};

/// Full pipeline with the latent drawn from q(r | context).
template <typename T>
PredictiveDistribution<T> forward(const TaskBatch& task, const ParamStore<T>& params, const ModelConfig& config,
                                  Rng& rng);

/// Deterministic path run once, decoded with `samples` latent draws from
/// q(r | context); one sample (and no rng use) for deterministic configs.
template <typename T>
std::vector<PredictiveDistribution<T>> predict_samples(const TaskBatch& task, const ParamStore<T>& params,
                                                       const ModelConfig& config, std::size_t samples, Rng& rng);

/// Checks the task against the config (fixed dims when DAB is off).
void check_task_compatible(const TaskBatch& task, const ModelConfig& config);

/// Dimension mismatch between a task and a fixed-dimension model.
class DimensionMismatchError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace danp
