#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tsteer/model.hpp"
#include "tsteer/regimegen.hpp"

namespace tsteer {

/// Mixed calm/crash training corpus cut into sliding (context, target) windows.
struct DatasetSpec {
    int n_series = 384;
    int extra_steps = 64;  // series length = context_len + horizon + extra_steps
    int stride = 16;
    double calm_fraction = 0.5;
    std::vector<double> severities{0.2, 0.5, 1.0, 1.5, 2.0};
    double x0_min = 1000.0;
    double x0_max = 6000.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
};

std::vector<TrainingSample> make_regime_dataset(const ModelConfig& config, const DatasetSpec& spec);

/// One synthetic series of `length` prices; `calm` ignores the severity.
std::vector<double> synthetic_context(double severity, bool calm, std::size_t length, std::uint64_t seed,
                                      double x0 = 2000.0);

}  // namespace tsteer
