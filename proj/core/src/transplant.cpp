#include "tsteer/transplant.hpp"

#include <atomic>
#include <chrono>
#include <cmath>

#include <spdlog/spdlog.h>

#include "tsteer/binio.hpp"
#include "tsteer/checkpoint.hpp"

namespace tsteer {

namespace {

constexpr std::uint32_t kSignatureVersion = 1;

// Once per process; experiments extract thousands of signatures.
void warn_if_short(std::size_t tokens) {
    static std::atomic<bool> warned{false};
    if (tokens < 4 && !warned.exchange(true))
        spdlog::warn("signatures over {} tokens: the time-axis std is a {}-point statistic and high-variance",
                     tokens, tokens);
}

}  // namespace

void SemanticSignature::validate() const {
    if (mu.rows() != sigma.rows() || mu.cols() != sigma.cols())
        throw std::invalid_argument("signature mu and sigma shapes differ");
    if (!mu.allFinite() || !sigma.allFinite()) throw std::invalid_argument("signature has non-finite entries");
    if ((sigma.array() < 0.0).any()) throw std::invalid_argument("signature sigma has negative entries");
}

SemanticSignature extract_signature(const ActivationTensor& a, std::string label) {
    if (a.tokens == 0) throw std::invalid_argument("activation has no tokens");
    warn_if_short(a.tokens);
    const auto n = static_cast<Eigen::Index>(a.variates);
    const auto d = static_cast<Eigen::Index>(a.width);
    SemanticSignature sig{a.layer, Mat::Zero(n, d), Mat::Zero(n, d), std::move(label)};
    const double inv_t = 1.0 / static_cast<double>(a.tokens);
    for (std::size_t v = 0; v < a.variates; ++v) {
        // Shifted by the first token so constant units give sigma == 0 exactly.
        const ConstMatMap x = a.variate(v);
        const RowVec first = x.row(0);
        const Mat shifted = x.rowwise() - first;
        const RowVec offset = shifted.colwise().sum() * inv_t;
        const RowVec var = (shifted.rowwise() - offset).array().square().colwise().sum().matrix() * inv_t;
        sig.mu.row(static_cast<Eigen::Index>(v)) = first + offset;
        sig.sigma.row(static_cast<Eigen::Index>(v)) = var.array().sqrt().matrix();
    }
    return sig;
}

ActivationTensor transplant(const ActivationTensor& target, const SemanticSignature& style, double epsilon) {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("epsilon must be finite and >= 0");
    if (style.variates() != target.variates || style.width() != target.width)
        throw std::invalid_argument("signature shape does not match target activation");
    if (style.layer != target.layer)
        throw std::invalid_argument("signature layer " + std::to_string(style.layer) + " != target layer " +
                                    std::to_string(target.layer));
    const SemanticSignature own = extract_signature(target);
    ActivationTensor out = target;
    for (std::size_t v = 0; v < target.variates; ++v) {
        const auto r = static_cast<Eigen::Index>(v);
        const RowVec gain = (style.sigma.row(r).array() / (own.sigma.row(r).array() + epsilon)).matrix();
        MatMap y = out.variate(v);
        for (Eigen::Index t = 0; t < y.rows(); ++t)
            y.row(t) = ((y.row(t) - own.mu.row(r)).array() * gain.array()).matrix() + style.mu.row(r);
    }
    return out;
}

std::string to_string(NormMode mode) {
    switch (mode) {
        case NormMode::mean_and_std: return "mean_and_std";
        case NormMode::mean_only: return "mean_only";
        case NormMode::std_only: return "std_only";
    }
    return "?";
}

NormMode norm_mode_from_string(const std::string& s) {
    if (s == "mean_and_std") return NormMode::mean_and_std;
    if (s == "mean_only") return NormMode::mean_only;
    if (s == "std_only") return NormMode::std_only;
    throw std::invalid_argument("unknown norm mode '" + s + "'");
}

double signature_norm(const SemanticSignature& sig, NormMode mode) {
    double s = 0.0;
    if (mode != NormMode::std_only) s += sig.mu.squaredNorm();
    if (mode != NormMode::mean_only) s += sig.sigma.squaredNorm();
    return std::sqrt(s);
}

SemanticSignature average_signatures(const std::vector<SemanticSignature>& sigs, std::string label) {
    if (sigs.empty()) throw std::invalid_argument("average_signatures: empty list");
    SemanticSignature out = sigs.front();
    for (std::size_t i = 1; i < sigs.size(); ++i) {
        const SemanticSignature& s = sigs[i];
        if (s.layer != out.layer || s.mu.rows() != out.mu.rows() || s.mu.cols() != out.mu.cols())
            throw std::invalid_argument("average_signatures: layer or shape mismatch");
        out.mu += s.mu;
        out.sigma += s.sigma;
    }
    out.mu /= static_cast<double>(sigs.size());
    out.sigma /= static_cast<double>(sigs.size());
    out.label = std::move(label);
    return out;
}

SemanticSignature context_signature(const Parameters& params, std::span<const double> context, int layer,
                                    std::string label) {
    const int L = params.config().n_layers;
    if (layer < 1 || layer > L)
        throw std::out_of_range("layer " + std::to_string(layer) + " outside [1, " + std::to_string(L) + "]");
    const ForwardResult fr = forward(params, context);
    return extract_signature(fr.activations[static_cast<std::size_t>(layer - 1)], std::move(label));
}

InterventionResult intervene(const Parameters& params, std::span<const double> target, const StyleSource& style,
                             int layer, double epsilon) {
    const int L = params.config().n_layers;
    if (layer < 1 || layer > L)
        throw std::out_of_range("layer " + std::to_string(layer) + " outside [1, " + std::to_string(L) + "]");
    ForwardResult fr = forward(params, target);
    const ActivationTensor& a = fr.activations[static_cast<std::size_t>(layer - 1)];
    SemanticSignature sig = std::holds_alternative<SemanticSignature>(style)
                                ? std::get<SemanticSignature>(style)
                                : context_signature(params, std::get<std::span<const double>>(style), layer);
    sig.validate();
    if (sig.variates() != a.variates || sig.width() != a.width)
        throw std::invalid_argument("style signature does not match the model's variates/width");
    if (sig.layer != layer)
        throw std::invalid_argument("style signature was taken at layer " + std::to_string(sig.layer) +
                                    ", intervention is at layer " + std::to_string(layer));
    const ActivationTensor moved = transplant(a, sig, epsilon);
    InterventionResult r{fr.head, forward_resume(params, moved, layer), fr.stats[0], std::move(sig)};
    return r;
}

ForecastDistribution intervened_forecast(const Parameters& params, std::span<const double> target,
                                         const StyleSource& style, int layer, double epsilon,
                                         std::size_t n_samples, std::uint64_t seed) {
    const InterventionResult r = intervene(params, target, style, layer, epsilon);
    return sample_forecast(r.intervened_head, n_samples, seed, r.stats);
}

std::string encode_signature(const SemanticSignature& sig) {
    sig.validate();
    binio::Writer w;
    w.magic("SSIG");
    w.u32(kSignatureVersion);
    w.u32(static_cast<std::uint32_t>(sig.layer));
    w.u64(sig.variates());
    w.u64(sig.width());
    for (Eigen::Index i = 0; i < sig.mu.size(); ++i) w.f32(sig.mu.data()[i]);
    for (Eigen::Index i = 0; i < sig.sigma.size(); ++i) w.f32(sig.sigma.data()[i]);
    w.u64(sig.label.size());
    w.bytes(sig.label);
    return w.take();
}

SemanticSignature decode_signature(std::string_view bytes) {
    binio::Reader r(bytes);
    r.expect_magic("SSIG");
    if (const auto v = r.u32(); v != kSignatureVersion)
        throw FormatError("unsupported signature version " + std::to_string(v));
    SemanticSignature sig;
    sig.layer = static_cast<int>(r.u32());
    const std::uint64_t n = r.u64(), d = r.u64();
    if (n == 0 || d == 0 || n > (1u << 20) || d > (1u << 20) || n * d * 8 > r.remaining())
        throw FormatError("signature dimensions inconsistent with payload");
    sig.mu.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    sig.sigma.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < sig.mu.size(); ++i) sig.mu.data()[i] = r.f32();
    for (Eigen::Index i = 0; i < sig.sigma.size(); ++i) sig.sigma.data()[i] = r.f32();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw FormatError("signature label overruns payload");
    sig.label = std::string(r.bytes(static_cast<std::size_t>(len)));
    if (!r.done()) throw FormatError("trailing bytes after signature");
    try {
        sig.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(e.what());
    }
    return sig;
}

void save_signature(const SemanticSignature& sig, const std::filesystem::path& path) {
    write_file(path, encode_signature(sig));
}

SemanticSignature load_signature(const std::filesystem::path& path) { return decode_signature(read_file(path)); }

namespace {

bool completed(const std::shared_future<SemanticSignature>& f) {
    return f.wait_for(std::chrono::seconds(0)) == std::future_status::ready;
}

}  // namespace

std::optional<SemanticSignature> SignatureCache::find(const Key& key) const {
    std::shared_future<SemanticSignature> f;
    {
        std::shared_lock lock(mutex_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        f = it->second;
    }
    if (!completed(f)) return std::nullopt;
    try {
        return f.get();
    } catch (...) {
        return std::nullopt;
    }
}

std::size_t SignatureCache::size() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& [key, f] : entries_) n += completed(f);
    return n;
}

}  // namespace tsteer
