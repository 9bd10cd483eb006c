#include "tsteer/service.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsteer/checkpoint.hpp"
#include "tsteer/dataset.hpp"
#include "tsteer/format.hpp"
#include "tsteer/geometry.hpp"
#include "tsteer/rng.hpp"

namespace tsteer {

using nlohmann::json;

struct SteerService::Session {
    Parameters params;
    RegimeCatalog catalog;
    std::optional<PriceSeries> prices;
    std::string hash;
};

namespace {

struct ApiError : std::runtime_error {
    ApiError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
    int status;
};

HttpResponse error_response(int status, const std::string& message) {
    return HttpResponse{status, json{{"code", status}, {"message", message}}.dump()};
}

json bands(const ForecastDistribution& f) {
    return json{{"median", f.median}, {"q5", f.q5}, {"q25", f.q25}, {"q75", f.q75}, {"q95", f.q95}};
}

std::uint64_t seed_of(const json& body) {
    if (!body.contains("seed")) return 0;
    const json& s = body.at("seed");
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<std::int64_t>() < 0))
        throw ApiError(400, "seed must be a non-negative integer");
    return s.get<std::uint64_t>();
}

std::size_t samples_of(const json& body, std::size_t max) {
    if (!body.contains("n_samples")) return 256;
    const json& n = body.at("n_samples");
    if (!n.is_number_integer() || n.get<std::int64_t>() < 1 || n.get<std::uint64_t>() > max)
        throw ApiError(400, "n_samples must be an integer in [1, " + std::to_string(max) + "]");
    return n.get<std::size_t>();
}

std::vector<double> inline_context(const json& values, int t_in) {
    if (!values.is_array()) throw ApiError(400, "context must be an array of numbers");
    if (values.size() != static_cast<std::size_t>(t_in))
        throw ApiError(400, "context has " + std::to_string(values.size()) + " values, expected " + std::to_string(t_in));
    std::vector<double> out;
    for (const auto& v : values) {
        if (!v.is_number() || !std::isfinite(v.get<double>())) throw ApiError(400, "context values must be finite numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace

SteerService::SteerService(ServiceOptions options) : options_(std::move(options)) {}
SteerService::~SteerService() = default;

void SteerService::load(Parameters params, RegimeCatalog catalog, std::optional<PriceSeries> prices) {
    auto s = std::make_shared<Session>();
    s->hash = checkpoint_hash(params);
    s->params = std::move(params);
    s->catalog = std::move(catalog);
    if (prices) s->prices = fill_gaps(*prices);
    std::atomic_store(&session_, std::shared_ptr<const Session>(std::move(s)));
}

bool SteerService::ready() const { return std::atomic_load(&session_) != nullptr; }

std::size_t SteerService::cached_signatures() const { return cache_.size(); }

HttpResponse SteerService::handle(const std::string& method, const std::string& path, const std::string& body) const {
    static const char* routes[] = {"/api/info", "/api/forecast", "/api/intervene", "/api/similarity"};
    const bool known = std::find(std::begin(routes), std::end(routes), path) != std::end(routes);
    if (!known) {
        ++n_errors_;
        return error_response(404, "no route " + path);
    }
    const bool want_get = path == "/api/info";
    if (method != (want_get ? "GET" : "POST")) {
        ++n_errors_;
        return error_response(405, path + " expects " + (want_get ? "GET" : "POST"));
    }
    const std::shared_ptr<const Session> s = std::atomic_load(&session_);
    if (!s) {
        ++n_errors_;
        return error_response(503, "checkpoint not loaded yet");
    }
    const Parameters& params = s->params;
    const ModelConfig& mc = params.config();

    auto resolve_window = [&](const std::string& name) {
        const RegimeWindow* w = s->catalog.find(name);
        if (!w) throw ApiError(404, "unknown window '" + name + "'");
        if (!s->prices) throw ApiError(404, "window '" + name + "' has no price data loaded");
        try {
            return slice_window(*s->prices, *w, static_cast<std::size_t>(mc.context_len)).values;
        } catch (const CoverageError& e) {
            throw ApiError(404, "window '" + name + "': " + e.what());
        }
    };
    auto resolve_context = [&](const json& spec) -> std::vector<double> {
        if (spec.is_array()) return inline_context(spec, mc.context_len);
        if (!spec.is_object()) throw ApiError(400, "expected a context array or an object");
        if (spec.contains("context")) return inline_context(spec.at("context"), mc.context_len);
        if (spec.contains("window_name")) {
            if (!spec.at("window_name").is_string()) throw ApiError(400, "window_name must be a string");
            return resolve_window(spec.at("window_name").get<std::string>());
        }
        throw ApiError(400, "expected 'context' or 'window_name'");
    };

    try {
        if (path == "/api/info") {
            json catalog = json::array();
            for (const auto& w : s->catalog.windows())
                catalog.push_back(json{{"name", w.name},
                                       {"type", to_string(w.semantic_type)},
                                       {"start", w.start_date.to_string()},
                                       {"end", w.end_date.to_string()},
                                       {"available", s->prices.has_value()}});
            const std::uint64_t calls = ++n_info_;
            json out{{"api_version", kApiVersion},
                     {"config", mc.to_json()},
                     {"checkpoint_hash", s->hash},
                     {"n_layers", mc.n_layers},
                     {"mid_layer", mc.mid_layer()},
                     {"catalog", catalog},
                     {"counters", json{{"info", calls},
                                       {"forecast", n_forecast_.load()},
                                       {"intervene", n_intervene_.load()},
                                       {"similarity", n_similarity_.load()},
                                       {"errors", n_errors_.load()}}}};
            return HttpResponse{200, out.dump()};
        }

        json req;
        try {
            req = json::parse(body);
        } catch (const json::parse_error& e) {
            throw ApiError(400, std::string("malformed JSON: ") + e.what());
        }
        if (!req.is_object()) throw ApiError(400, "request body must be a JSON object");

        if (path == "/api/forecast") {
            const std::vector<double> ctx = resolve_context(req);
            const std::size_t n = samples_of(req, options_.max_samples);
            const std::uint64_t seed = seed_of(req);
            const ForwardResult fr = forward(params, ctx);
            const ForecastDistribution f = sample_forecast(fr.head, n, seed, fr.stats.front());
            json out = bands(f);
            out["n_samples"] = n;
            out["seed"] = seed;
            ++n_forecast_;
            return HttpResponse{200, out.dump()};
        }

        if (path == "/api/intervene") {
            if (!req.contains("target")) throw ApiError(400, "missing 'target'");
            const std::vector<double> target = resolve_context(req.at("target"));
            if (!req.contains("layer") || !req.at("layer").is_number_integer()) throw ApiError(400, "'layer' must be an integer");
            const int layer = req.at("layer").get<int>();
            if (layer < 1 || layer > mc.n_layers)
                throw ApiError(400, "layer " + std::to_string(layer) + " outside [1, " + std::to_string(mc.n_layers) + "]");
            const double eps = req.value("epsilon", kDefaultEpsilon);
            if (!(eps > 0.0) || !std::isfinite(eps)) throw ApiError(400, "epsilon must be a positive finite number");
            const std::size_t n = samples_of(req, options_.max_samples);
            const std::uint64_t seed = seed_of(req);
            if (!req.contains("style") || !req.at("style").is_object()) throw ApiError(400, "'style' must be an object");
            const json& st = req.at("style");

            SemanticSignature sig;
            json style_echo;
            if (st.contains("severity")) {
                if (!st.at("severity").is_number()) throw ApiError(400, "severity must be a number");
                const double sev = st.at("severity").get<double>();
                if (!(sev >= 0.0) || !std::isfinite(sev)) throw ApiError(400, "severity must be finite and >= 0");
                const std::uint64_t style_seed = derive_seed(seed, "style");
                const std::string label = "synthetic:s=" + format_double(sev) + ":seed=" + std::to_string(style_seed);
                sig = cache_.get_or_compute({s->hash, layer, label}, [&] {
                    const auto ctx = synthetic_context(sev, false, static_cast<std::size_t>(mc.context_len), style_seed);
                    return context_signature(params, ctx, layer, label);
                });
                style_echo = json{{"severity", sev}, {"style_seed", style_seed}, {"label", label}};
            } else if (st.contains("window_name")) {
                if (!st.at("window_name").is_string()) throw ApiError(400, "window_name must be a string");
                const std::string name = st.at("window_name");
                const std::string label = "window:" + name;
                const std::vector<double> ctx = resolve_window(name);
                sig = cache_.get_or_compute({s->hash, layer, label},
                                            [&] { return context_signature(params, ctx, layer, label); });
                style_echo = json{{"window_name", name}, {"label", label}};
            } else if (st.contains("context")) {
                const std::vector<double> ctx = inline_context(st.at("context"), mc.context_len);
                sig = context_signature(params, ctx, layer, "inline");
                style_echo = json{{"label", "inline"}};
            } else {
                throw ApiError(400, "style needs 'severity', 'window_name' or 'context'");
            }

            const InterventionResult r = intervene(params, target, sig, layer, eps);
            const ForecastDistribution base = sample_forecast(r.baseline_head, n, seed, r.stats);
            const ForecastDistribution intv = sample_forecast(r.intervened_head, n, seed, r.stats);
            json out{{"layer", layer},
                     {"epsilon", eps},
                     {"n_samples", n},
                     {"seed", seed},
                     {"style", style_echo},
                     {"signature_norm", signature_norm(sig)},
                     {"baseline", bands(base)},
                     {"intervened", bands(intv)}};
            ++n_intervene_;
            return HttpResponse{200, out.dump()};
        }

        // /api/similarity
        auto resolve_set = [&](const char* key) {
            if (!req.contains(key) || !req.at(key).is_object()) throw ApiError(400, std::string("'") + key + "' must be an object");
            const json& spec = req.at(key);
            std::vector<std::vector<double>> out;
            if (spec.contains("window_names")) {
                for (const auto& n : spec.at("window_names")) {
                    if (!n.is_string()) throw ApiError(400, "window_names must hold strings");
                    out.push_back(resolve_window(n.get<std::string>()));
                }
            } else if (spec.contains("contexts")) {
                for (const auto& c : spec.at("contexts")) out.push_back(inline_context(c, mc.context_len));
            } else if (spec.contains("synthetic")) {
                const json& g = spec.at("synthetic");
                const std::string regime = g.value("regime", "crash");
                if (regime != "calm" && regime != "crash") throw ApiError(400, "regime must be calm or crash");
                const double sev = g.value("severity", 1.0);
                if (!(sev >= 0.0) || !std::isfinite(sev)) throw ApiError(400, "severity must be finite and >= 0");
                const int count = g.value("count", 8);
                if (count < 1 || count > 256) throw ApiError(400, "count must be in [1, 256]");
                const std::uint64_t seed = g.value("seed", std::uint64_t{0});
                for (int i = 0; i < count; ++i)
                    out.push_back(synthetic_context(sev, regime == "calm", static_cast<std::size_t>(mc.context_len),
                                                    derive_seed(seed, std::string(key) + "/" + std::to_string(i))));
            } else {
                throw ApiError(400, std::string("'") + key + "' needs window_names, contexts or synthetic");
            }
            if (out.empty()) throw ApiError(400, std::string("'") + key + "' is empty");
            return out;
        };
        const auto a = resolve_set("set_a");
        const auto b = resolve_set("set_b");
        if (a.size() != b.size()) throw ApiError(400, "set_a and set_b must have the same number of contexts");
        const json& kj = req.contains("k") ? req.at("k") : json(20);
        if (!kj.is_number_integer()) throw ApiError(400, "k must be an integer");
        const int k = kj.get<int>();
        const std::size_t pooled = 2 * a.size() * static_cast<std::size_t>(mc.tokens());
        if (k < 1 || static_cast<std::size_t>(k) > pooled || k > mc.d_model)
            throw ApiError(400, "k=" + std::to_string(k) + " outside [1, min(pooled samples " + std::to_string(pooled) +
                                    ", d_model " + std::to_string(mc.d_model) + ")]");
        const SimilarityMatrix m = layer_similarity_table(params, a, b, k);
        json values = json::array();
        for (Eigen::Index l = 0; l < m.values.cols(); ++l)
            values.push_back(json{{"layer", l + 1}, {"value", m.values(0, l)}});
        ++n_similarity_;
        return HttpResponse{200, json{{"k", k}, {"values", values}}.dump()};
    } catch (const ApiError& e) {
        ++n_errors_;
        return error_response(e.status, e.what());
    } catch (const json::exception& e) {
        ++n_errors_;
        return error_response(400, std::string("bad request field: ") + e.what());
    } catch (const std::invalid_argument& e) {
        ++n_errors_;
        return error_response(400, e.what());
    } catch (const std::out_of_range& e) {
        ++n_errors_;
        return error_response(400, e.what());
    } catch (const std::exception& e) {
        ++n_errors_;
        return error_response(500, e.what());
    }
}

}  // namespace tsteer
