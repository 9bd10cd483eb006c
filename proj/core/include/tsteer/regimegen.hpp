#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsteer/date.hpp"
#include "tsteer/rng.hpp"

namespace tsteer {

/// Per-step parameters of the discrete jump-diffusion on log-prices.
struct RegimeParams {
    double mu = 0.0;          // drift per step
    double sigma = 0.0;       // diffusion volatility per step
    double lambda = 0.0;      // expected jumps per step
    double mu_jump = 0.0;     // mean jump size
    double sigma_jump = 0.0;  // jump size std

    /// Throws std::invalid_argument when a scale or intensity is negative or non-finite.
    void validate() const;

    friend bool operator==(const RegimeParams&, const RegimeParams&) = default;
};

/// Dimensionless crash severity, s >= 0.
class SeverityFactor {
public:
    explicit SeverityFactor(double s);
    double value() const { return s_; }

private:
    double s_;
};

struct SeriesSpec {
    std::size_t length = 1;  // number of emitted prices, including x0
    double x0 = 2000.0;      // initial price
    std::uint64_t seed = 0;

    void validate() const;
};

enum class Provenance { synthetic, ingested };

/// Ordered prices with optional calendar dates. Log-prices are derived on demand.
struct PriceSeries {
    std::vector<double> values;
    std::vector<Date> dates;  // empty or same length as values, strictly increasing
    Provenance provenance = Provenance::synthetic;
    std::optional<RegimeParams> params;

    std::size_t size() const { return values.size(); }
    bool has_dates() const { return !dates.empty(); }
    std::vector<double> log_values() const;

    /// Throws std::invalid_argument on non-positive values or unordered dates.
    void validate() const;
};

RegimeParams calm_params();
RegimeParams crash_params(SeverityFactor s);
inline RegimeParams crash_params(double s) { return crash_params(SeverityFactor{s}); }

struct JumpDraw {
    std::uint32_t count = 0;
    double value = 0.0;
};

/// One jump term: N ~ Poisson(lambda), then the sum of N draws from N(mu_jump, sigma_jump^2).
JumpDraw step_jump(double lambda, double mu_jump, double sigma_jump, Rng& rng);

/// Simulates spec.length prices starting at spec.x0. Each step draws, in order,
/// the diffusion shock, the jump count and the jump sizes from one stream.
PriceSeries simulate(const RegimeParams& params, const SeriesSpec& spec);

/// Attaches consecutive daily dates starting at `start`.
void attach_daily_dates(PriceSeries& series, Date start = Date{2000, 1, 1});

}  // namespace tsteer
