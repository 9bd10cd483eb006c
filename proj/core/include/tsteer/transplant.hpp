#pragma once

#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <variant>

#include "tsteer/binio.hpp"
#include "tsteer/model.hpp"

namespace tsteer {

constexpr double kDefaultEpsilon = 1e-5;

/// Time-axis statistics of one layer's activations: mu and sigma are N x D.
struct SemanticSignature {
    int layer = 0;
    Mat mu;
    Mat sigma;
    std::string label;

    std::size_t variates() const { return static_cast<std::size_t>(mu.rows()); }
    std::size_t width() const { return static_cast<std::size_t>(mu.cols()); }
    /// Throws std::invalid_argument when shapes differ, sigma < 0 or entries are non-finite.
    void validate() const;

    friend bool operator==(const SemanticSignature& a, const SemanticSignature& b) {
        return a.layer == b.layer && a.mu == b.mu && a.sigma == b.sigma && a.label == b.label;
    }
};

/// Mean and population standard deviation over the token axis.
SemanticSignature extract_signature(const ActivationTensor& activation, std::string label = {});

/// ((A - mu_t) / (sigma_t + eps)) * sigma_s + mu_s, broadcast over tokens.
ActivationTensor transplant(const ActivationTensor& target, const SemanticSignature& style,
                            double epsilon = kDefaultEpsilon);

/// std_only is a diagnostic; experiments report it next to the configured mode.
enum class NormMode { mean_and_std, mean_only, std_only };

std::string to_string(NormMode mode);
NormMode norm_mode_from_string(const std::string& s);

/// Euclidean norm over the concatenated (mu, sigma) entries, or one of them alone.
double signature_norm(const SemanticSignature& sig, NormMode mode = NormMode::mean_and_std);

/// Entrywise mean of signatures that share layer and shape.
SemanticSignature average_signatures(const std::vector<SemanticSignature>& sigs, std::string label = {});

/// Style taken either from a context's forward pass or a stored signature.
using StyleSource = std::variant<std::span<const double>, SemanticSignature>;

struct InterventionResult {
    HeadOutput baseline_head;
    HeadOutput intervened_head;
    NormStats stats;
    SemanticSignature style;
};

/// Forward on the target, transplant the style at `layer`, resume to the head.
InterventionResult intervene(const Parameters& params, std::span<const double> target, const StyleSource& style,
                             int layer, double epsilon = kDefaultEpsilon);

/// Same, sampled: n_samples paths de-normalized with the target's statistics.
ForecastDistribution intervened_forecast(const Parameters& params, std::span<const double> target,
                                         const StyleSource& style, int layer, double epsilon,
                                         std::size_t n_samples, std::uint64_t seed);

/// Signature of `context` at `layer`.
SemanticSignature context_signature(const Parameters& params, std::span<const double> context, int layer,
                                    std::string label = {});

std::string encode_signature(const SemanticSignature& sig);
SemanticSignature decode_signature(std::string_view bytes);
void save_signature(const SemanticSignature& sig, const std::filesystem::path& path);
SemanticSignature load_signature(const std::filesystem::path& path);

/// Memo of signatures keyed by (checkpoint hash, layer, source label). Readers
/// share a lock; the first writer for a key computes while holding it exclusively.
class SignatureCache {
public:
    using Key = std::tuple<std::string, int, std::string>;

    /// Completed entries only.
    std::optional<SemanticSignature> find(const Key& key) const;

    /// Computes each key once. Callers racing on the same key wait for the first
    /// computation; other keys are never blocked by it. A throwing computation
    /// leaves no entry behind.
    template <class Compute>
    SemanticSignature get_or_compute(const Key& key, Compute&& compute) {
        std::promise<SemanticSignature> promise;
        {
            std::unique_lock lock(mutex_);
            if (auto it = entries_.find(key); it != entries_.end()) {
                auto pending = it->second;
                lock.unlock();
                return pending.get();
            }
            entries_.emplace(key, promise.get_future().share());
        }
        try {
            SemanticSignature sig = compute();
            promise.set_value(sig);
            return sig;
        } catch (...) {
            promise.set_exception(std::current_exception());
            std::unique_lock lock(mutex_);
            entries_.erase(key);
            throw;
        }
    }

    /// Completed entries only.
    std::size_t size() const;

private:
    mutable std::shared_mutex mutex_;
    std::map<Key, std::shared_future<SemanticSignature>> entries_;
};

}  // namespace tsteer
