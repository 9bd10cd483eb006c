#include "tsteer/regimegen.hpp"

#include <cmath>
#include <stdexcept>

namespace tsteer {

namespace {

constexpr std::uint64_t kSeriesStream = 0x5e71e5;

bool finite_nonneg(double x) { return std::isfinite(x) && x >= 0.0; }

}  // namespace

void RegimeParams::validate() const {
    if (!std::isfinite(mu) || !std::isfinite(mu_jump))
        throw std::invalid_argument("regime params: drift terms must be finite");
    if (!finite_nonneg(sigma)) throw std::invalid_argument("regime params: sigma must be >= 0");
    if (!finite_nonneg(lambda)) throw std::invalid_argument("regime params: lambda must be >= 0");
    if (!finite_nonneg(sigma_jump))
        throw std::invalid_argument("regime params: sigma_jump must be >= 0");
}

SeverityFactor::SeverityFactor(double s) : s_(s) {
    if (!finite_nonneg(s)) throw std::invalid_argument("severity must be a finite value >= 0");
}

void SeriesSpec::validate() const {
    if (length < 1) throw std::invalid_argument("series length must be >= 1");
    if (!(x0 > 0.0) || !std::isfinite(x0)) throw std::invalid_argument("x0 must be > 0");
}

std::vector<double> PriceSeries::log_values() const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::log(values[i]);
    return out;
}

void PriceSeries::validate() const {
    for (double v : values)
        if (!(v > 0.0) || !std::isfinite(v))
            throw std::invalid_argument("price series values must be finite and > 0");
    if (!dates.empty()) {
        if (dates.size() != values.size())
            throw std::invalid_argument("price series dates and values differ in length");
        for (std::size_t i = 1; i < dates.size(); ++i)
            if (!(dates[i - 1] < dates[i]))
                throw std::invalid_argument("price series dates must be strictly increasing");
    }
}

RegimeParams calm_params() { return RegimeParams{2e-4, 3e-3, 0.0, 0.0, 0.0}; }

RegimeParams crash_params(SeverityFactor severity) {
    const double s = severity.value();
    RegimeParams p;
    p.mu = -8e-4 * s;
    p.sigma = 8e-3 * s;
    p.mu_jump = -2e-2 * s;
    p.sigma_jump = 1e-2 * std::sqrt(s);
    p.lambda = 5e-2 * s;
    return p;
}

JumpDraw step_jump(double lambda, double mu_jump, double sigma_jump, Rng& rng) {
    JumpDraw out;
    out.count = rng.poisson(lambda);
    for (std::uint32_t k = 0; k < out.count; ++k) out.value += mu_jump + sigma_jump * rng.normal();
    return out;
}

PriceSeries simulate(const RegimeParams& params, const SeriesSpec& spec) {
    params.validate();
    spec.validate();

    Rng rng(spec.seed, kSeriesStream);
    const double drift = params.mu - 0.5 * params.sigma * params.sigma;

    PriceSeries out;
    out.provenance = Provenance::synthetic;
    out.params = params;
    out.values.reserve(spec.length);

    double x = std::log(spec.x0);
    out.values.push_back(spec.x0);
    for (std::size_t t = 1; t < spec.length; ++t) {
        const double eps = rng.normal();
        const JumpDraw jump = step_jump(params.lambda, params.mu_jump, params.sigma_jump, rng);
        x = x + drift + params.sigma * eps + jump.value;
        out.values.push_back(std::exp(x));
    }
    return out;
}

void attach_daily_dates(PriceSeries& series, Date start) {
    series.dates.resize(series.values.size());
    const std::int64_t d0 = start.to_days();
    for (std::size_t i = 0; i < series.dates.size(); ++i)
        series.dates[i] = Date::from_days(d0 + static_cast<std::int64_t>(i));
}

}  // namespace tsteer
