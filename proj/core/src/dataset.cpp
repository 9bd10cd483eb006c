#include "tsteer/dataset.hpp"

#include <nlohmann/json.hpp>

#include "tsteer/rng.hpp"

namespace tsteer {

using nlohmann::json;

json DatasetSpec::to_json() const {
    return json{{"n_series", n_series}, {"extra_steps", extra_steps}, {"stride", stride},
                {"calm_fraction", calm_fraction}, {"severities", severities}, {"x0_min", x0_min},
                {"x0_max", x0_max}, {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const json& j) {
    DatasetSpec s;
    s.n_series = j.value("n_series", s.n_series);
    s.extra_steps = j.value("extra_steps", s.extra_steps);
    s.stride = j.value("stride", s.stride);
    s.calm_fraction = j.value("calm_fraction", s.calm_fraction);
    s.severities = j.value("severities", s.severities);
    s.x0_min = j.value("x0_min", s.x0_min);
    s.x0_max = j.value("x0_max", s.x0_max);
    s.seed = j.value("seed", s.seed);
    return s;
}

std::vector<TrainingSample> make_regime_dataset(const ModelConfig& config, const DatasetSpec& spec) {
    if (spec.n_series < 1 || spec.stride < 1 || spec.extra_steps < 0 || spec.severities.empty())
        throw std::invalid_argument("invalid dataset spec");

    const auto t_in = static_cast<std::size_t>(config.context_len);
    const auto t_out = static_cast<std::size_t>(config.horizon);
    const std::size_t length = t_in + t_out + static_cast<std::size_t>(spec.extra_steps);

    Rng picker(spec.seed, 0xda7a);
    std::vector<TrainingSample> out;
    for (int i = 0; i < spec.n_series; ++i) {
        const bool calm = picker.uniform() < spec.calm_fraction;
        const double severity = spec.severities[picker.below(spec.severities.size())];
        const double x0 = spec.x0_min + (spec.x0_max - spec.x0_min) * picker.uniform();
        const RegimeParams params = calm ? calm_params() : crash_params(severity);
        const PriceSeries series = simulate(params, SeriesSpec{length, x0, derive_seed(spec.seed, "series" + std::to_string(i))});

        for (std::size_t start = 0; start + t_in + t_out <= length; start += static_cast<std::size_t>(spec.stride)) {
            TrainingSample s;
            s.context.assign(series.values.begin() + static_cast<std::ptrdiff_t>(start),
                             series.values.begin() + static_cast<std::ptrdiff_t>(start + t_in));
            s.target.assign(series.values.begin() + static_cast<std::ptrdiff_t>(start + t_in),
                            series.values.begin() + static_cast<std::ptrdiff_t>(start + t_in + t_out));
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<double> synthetic_context(double severity, bool calm, std::size_t length, std::uint64_t seed, double x0) {
    const RegimeParams params = calm ? calm_params() : crash_params(severity);
    return simulate(params, SeriesSpec{length, x0, seed}).values;
}

}  // namespace tsteer
