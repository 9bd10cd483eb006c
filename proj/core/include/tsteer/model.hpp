#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tsteer/ingest.hpp"
#include "tsteer/tensor.hpp"

namespace tsteer {

/// How a context is brought to model units before patch embedding.
///  - standard:   (x - mean) / std
///  - mean_scale: (x - mean) / (scale_unit * mean|x|), i.e. deviations measured
///                in fractions of the context's own price level.
enum class Normalization { standard, mean_scale };

/// Origin of the forecast in normalized units.
///  - last_value:   the head predicts offsets from the last context value
///  - context_mean: the head predicts normalized levels directly
enum class Anchor { last_value, context_mean };

/// What the patches hold.
///  - levels:  normalized prices
///  - returns: normalized first differences, the first entry 0
enum class InputMode { levels, returns };

/// Token summary fed to the head.
///  - last_token: the final patch token
///  - mean_pool:  the average over all patch tokens
enum class Readout { last_token, mean_pool };

struct ModelConfig {
    int n_layers = 6;
    int d_model = 64;
    int n_heads = 4;
    int patch_size = 16;
    int context_len = 128;
    int horizon = 32;
    int ffn_mult = 4;
    std::uint64_t seed = 0;
    Normalization normalization = Normalization::mean_scale;
    double scale_unit = 0.01;
    Anchor anchor = Anchor::last_value;
    InputMode input = InputMode::returns;
    Readout readout = Readout::mean_pool;

    int tokens() const { return context_len / patch_size; }
    int head_dim() const { return d_model / n_heads; }
    int ffn_width() const { return d_model * ffn_mult; }
    int mid_layer() const { return (n_layers + 1) / 2; }

    /// Throws std::invalid_argument on inconsistent shapes.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSlot {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return rows * cols; }
};

/// All trainable tensors stored contiguously in declaration order. Gradients
/// and optimizer moments reuse the same type.
class Parameters {
public:
    Parameters() = default;
    explicit Parameters(const ModelConfig& config);  // zero-filled

    const ModelConfig& config() const { return config_; }
    const std::vector<TensorSlot>& slots() const { return slots_; }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }

    std::size_t slot_index(const std::string& name) const;
    MatMap tensor(std::size_t slot);
    ConstMatMap tensor(std::size_t slot) const;
    MatMap tensor(const std::string& name) { return tensor(slot_index(name)); }
    ConstMatMap tensor(const std::string& name) const { return tensor(slot_index(name)); }

    /// Same shape, zero-valued.
    Parameters zeros_like() const;

    /// Rounds every value through float; checkpoints hold f32 payloads.
    void round_to_float();

    friend bool operator==(const Parameters& a, const Parameters& b) {
        return a.config_ == b.config_ && a.values_ == b.values_;
    }

private:
    ModelConfig config_;
    std::vector<TensorSlot> slots_;
    std::vector<double> values_;
};

/// Location/scale used to map a context to model units, plus the price the
/// forecast is measured from.
struct NormStats {
    double loc = 0.0;
    double scale = 1.0;
    double anchor = 0.0;

    double normalize(double x) const { return (x - loc) / scale; }
    double denormalize(double z) const { return loc + scale * z; }
    double normalize_target(double y) const { return (y - anchor) / scale; }
    double forecast_value(double z) const { return anchor + scale * z; }
};

constexpr double kScaleFloor = 1e-8;

NormStats context_stats(std::span<const double> context, const ModelConfig& config);

/// Per-variate Gaussian head in normalized space: variates x horizon.
struct HeadOutput {
    Mat mean;
    Mat log_std;
    friend bool operator==(const HeadOutput& a, const HeadOutput& b) {
        return a.mean == b.mean && a.log_std == b.log_std;
    }
};

struct ForwardResult {
    HeadOutput head;
    std::vector<ActivationTensor> activations;  // A_1 .. A_L
    std::vector<NormStats> stats;                // one per variate
};

class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(int layer, const std::string& what) : std::runtime_error(what), layer_(layer) {}
    /// 0 for the embedding, l for block l, n_layers + 1 for the head.
    int layer() const { return layer_; }

private:
    int layer_;
};

/// Deterministic initialization: weights ~ N(0, 1/fan_in), biases 0, norm gains 1.
Parameters build(const ModelConfig& config, std::uint64_t seed);
inline Parameters build(const ModelConfig& config) { return build(config, config.seed); }

/// contexts: variates x context_len.
ForwardResult forward(const Parameters& params, const Mat& contexts);
ForwardResult forward(const Parameters& params, std::span<const double> context);
inline ForwardResult forward(const Parameters& params, const ContextWindow& ctx) {
    return forward(params, std::span<const double>(ctx.values));
}

/// Runs blocks layer+1..L and the head on `activation`, which stands in for A_layer.
HeadOutput forward_resume(const Parameters& params, const ActivationTensor& activation, int layer);

struct ForecastDistribution {
    Mat samples;  // n_samples x horizon, price units
    std::vector<double> median, q5, q25, q75, q95;

    std::size_t horizon() const { return median.size(); }
    static ForecastDistribution from_samples(Mat samples);
};

/// Linear-interpolation quantile of an unsorted sample (numpy's default rule).
double quantile(std::vector<double> values, double q);

/// Draws n_samples independent Gaussian paths for one variate and maps them back
/// to price units. std = max(exp(log_std), 1e-8).
ForecastDistribution sample_forecast(const HeadOutput& head, std::size_t n_samples, std::uint64_t seed,
                                     const NormStats& stats, std::size_t variate = 0);

/// Mean Gaussian negative log-likelihood of the normalized target under the head.
double nll(const HeadOutput& head, const Mat& normalized_target);
double loss(const Parameters& params, std::span<const double> context, std::span<const double> target);

/// Exact reverse-mode gradient of `loss`. Returns the loss through `loss_out` when given.
Parameters grad(const Parameters& params, std::span<const double> context, std::span<const double> target,
                double* loss_out = nullptr);

struct TrainingSample {
    std::vector<double> context;
    std::vector<double> target;
};

struct TrainConfig {
    int steps = 3000;
    int batch_size = 32;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
    Parameters params;
    std::vector<double> loss_curve;  // mean batch loss per step
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

using TrainObserver = std::function<void(int step, double loss)>;

/// Mini-batch Adam with global gradient-norm clipping. Batches are drawn with
/// replacement from a stream derived from train.seed. The returned parameters
/// are rounded to f32 so they equal a reloaded checkpoint.
TrainResult train(const ModelConfig& config, std::span<const TrainingSample> dataset, const TrainConfig& train,
                  const TrainObserver& observer = {});

}  // namespace tsteer
