#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <string>

#include "tsteer/ingest.hpp"
#include "tsteer/model.hpp"
#include "tsteer/transplant.hpp"

namespace tsteer {

constexpr const char* kApiVersion = "1";

struct ServiceOptions {
    std::string cors_origin = "*";
    std::size_t max_samples = 1024;
};

struct HttpResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

/// Request handling for the steering API, independent of any socket layer.
///
///   GET  /api/info
///   POST /api/forecast    {context | window_name, n_samples, seed}
///   POST /api/intervene   {target, style: {window_name | severity | context}, layer, epsilon, n_samples, seed}
///   POST /api/similarity  {set_a, set_b, k}
///
/// Errors come back as {"code": status, "message": ...}. The loaded session is
/// immutable; the signature cache and counters are the only shared state.
class SteerService {
public:
    explicit SteerService(ServiceOptions options = {});
    ~SteerService();

    /// Publishes the checkpoint; requests before this get 503.
    void load(Parameters params, RegimeCatalog catalog = RegimeCatalog::defaults(),
              std::optional<PriceSeries> prices = std::nullopt);
    bool ready() const;

    HttpResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

    const ServiceOptions& options() const { return options_; }
    std::size_t cached_signatures() const;

private:
    struct Session;
    ServiceOptions options_;
    std::shared_ptr<const Session> session_;
    mutable SignatureCache cache_;
    mutable std::atomic<std::uint64_t> n_info_{0}, n_forecast_{0}, n_intervene_{0}, n_similarity_{0}, n_errors_{0};
};

}  // namespace tsteer
