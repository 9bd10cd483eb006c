#include "tsteer/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "tsteer/checkpoint.hpp"
#include "tsteer/format.hpp"
#include "tsteer/ingest.hpp"
#include "tsteer/plot.hpp"
#include "tsteer/rng.hpp"

namespace tsteer {

using nlohmann::json;

namespace {

constexpr const char* kIds[] = {"steer",       "suppress",      "dose_response", "cross_crash",
                                "geometry_heatmap", "layer_sweep", "pca_ablation",  "size_sweep"};

bool is_steering(ExperimentId id) {
    return id == ExperimentId::steer || id == ExperimentId::suppress || id == ExperimentId::layer_sweep ||
           id == ExperimentId::size_sweep;
}

bool is_geometry(ExperimentId id) { return id == ExperimentId::geometry_heatmap || id == ExperimentId::pca_ablation; }

std::string vector_mode_name(VectorMode m) { return m == VectorMode::tokens ? "tokens" : "time_averaged"; }

VectorMode vector_mode_from_string(const std::string& s) {
    if (s == "tokens") return VectorMode::tokens;
    if (s == "time_averaged") return VectorMode::time_averaged;
    throw std::invalid_argument("unknown vector_mode '" + s + "'");
}

double population_std(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

json bands_json(const ForecastDistribution& f) {
    return json{{"median", f.median}, {"q5", f.q5}, {"q25", f.q25}, {"q75", f.q75}, {"q95", f.q95}};
}

Bands bands_from_json(const json& j) {
    return Bands{j.at("median").get<std::vector<double>>(), j.at("q5").get<std::vector<double>>(),
                 j.at("q25").get<std::vector<double>>(), j.at("q75").get<std::vector<double>>(),
                 j.at("q95").get<std::vector<double>>()};
}

struct Source {
    std::string label;
    std::vector<double> values;
};

std::string synth_label(bool calm, double severity, std::uint64_t seed) {
    return (calm ? std::string("calm") : "crash(s=" + format_double(severity) + ")") + ":" + std::to_string(seed);
}

Source synth_source(const ModelConfig& mc, bool calm, double severity, std::uint64_t seed) {
    return Source{synth_label(calm, severity, seed),
                  synthetic_context(severity, calm, static_cast<std::size_t>(mc.context_len), seed)};
}

json norms_json(const SemanticSignature& sig) {
    return json{{"mean_and_std", signature_norm(sig, NormMode::mean_and_std)},
                {"mean_only", signature_norm(sig, NormMode::mean_only)},
                {"std_only", signature_norm(sig, NormMode::std_only)}};
}

json intervention_record(const Parameters& params, const ExperimentConfig& cfg, std::uint64_t seed,
                         const std::string& kind, int layer, const Source& target, const StyleSource& style,
                         const std::string& style_label) {
    const std::uint64_t sample_seed = derive_seed(seed, "sample");
    const InterventionResult r = intervene(params, target.values, style, layer, cfg.epsilon);
    const ForecastDistribution base = sample_forecast(r.baseline_head, cfg.n_samples, sample_seed, r.stats);
    const ForecastDistribution intv = sample_forecast(r.intervened_head, cfg.n_samples, sample_seed, r.stats);
    json rec;
    rec["seed"] = seed;
    rec["kind"] = kind;
    rec["n_layers"] = params.config().n_layers;
    rec["layer"] = layer;
    rec["target"] = target.label;
    rec["style"] = style_label;
    rec["target_std"] = population_std(target.values);
    rec["context"] = target.values;
    rec["baseline"] = bands_json(base);
    rec["intervened"] = bands_json(intv);
    rec["baseline_terminal"] = base.median.back();
    rec["intervened_terminal"] = intv.median.back();
    rec["band90_width"] = intv.q95.back() - intv.q5.back();
    rec["norms"] = norms_json(r.style);
    return rec;
}

std::vector<int> resolve_layers(const ExperimentConfig& cfg, const ModelConfig& mc) {
    std::vector<int> layers = cfg.layers;
    if (layers.empty()) {
        if (cfg.id == ExperimentId::layer_sweep) {
            for (int l = 1; l <= mc.n_layers; ++l) layers.push_back(l);
        } else {
            layers.push_back(mc.mid_layer());
        }
    }
    for (int l : layers)
        if (l < 1 || l > mc.n_layers)
            throw std::invalid_argument("layer " + std::to_string(l) + " outside [1, " + std::to_string(mc.n_layers) + "]");
    return layers;
}

struct RealData {
    PriceSeries series;
    RegimeCatalog catalog;
};

std::optional<RealData> load_real_data(const ExperimentConfig& cfg) {
    if (cfg.csv.empty()) return std::nullopt;
    RealData d{fill_gaps(load_csv(cfg.csv)), cfg.catalog.empty() ? RegimeCatalog::defaults()
                                                                  : RegimeCatalog::load_json(cfg.catalog)};
    return d;
}

std::vector<Source> window_sources(const RealData& d, const std::vector<std::string>& names, SemanticType fallback,
                                   int t_in) {
    std::vector<std::string> chosen = names;
    if (chosen.empty())
        for (const auto& w : d.catalog.windows())
            if (w.semantic_type == fallback) chosen.push_back(w.name);
    std::vector<Source> out;
    for (const auto& name : chosen) {
        const RegimeWindow* w = d.catalog.find(name);
        if (!w) throw std::invalid_argument("unknown window '" + name + "'");
        out.push_back(Source{name, slice_window(d.series, *w, static_cast<std::size_t>(t_in)).values});
    }
    if (out.empty()) throw std::invalid_argument("no windows selected");
    return out;
}

/// Mean signature of `count` synthetic crashes; realization k uses the same seed at every severity.
SemanticSignature ensemble_signature(const Parameters& params, double severity, int count, std::uint64_t seed,
                                     int layer) {
    std::vector<SemanticSignature> sigs;
    for (int k = 0; k < count; ++k) {
        const auto ctx = synthetic_context(severity, false, static_cast<std::size_t>(params.config().context_len),
                                           derive_seed(seed, "style/" + std::to_string(k)));
        sigs.push_back(context_signature(params, ctx, layer));
    }
    return average_signatures(sigs, "crash(s=" + format_double(severity) + ") x" + std::to_string(count));
}

json steering_records(const ExperimentConfig& cfg, const Parameters& params) {
    const ModelConfig& mc = params.config();
    const auto real = load_real_data(cfg);
    const auto& sev = cfg.severities;
    json records = json::array();
    for (int layer : resolve_layers(cfg, mc)) {
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<Source> calm, crash;
            std::vector<Source> calm_styles, crash_styles;
            if (real) {
                calm = window_sources(*real, cfg.target_windows, SemanticType::calm, mc.context_len);
                crash_styles = window_sources(*real, cfg.style_windows, SemanticType::crash, mc.context_len);
                crash = crash_styles;
                calm_styles = calm;
            } else {
                for (int i = 0; i < cfg.n_targets; ++i) {
                    const std::string si = std::to_string(i);
                    calm.push_back(synth_source(mc, true, 0.0, derive_seed(seed, "calm_target/" + si)));
                    crash.push_back(synth_source(mc, false, sev[static_cast<std::size_t>(i) % sev.size()],
                                                 derive_seed(seed, "crash_target/" + si)));
                }
                for (int j = 0; j < cfg.n_styles; ++j) {
                    const std::string sj = std::to_string(j);
                    crash_styles.push_back(synth_source(mc, false, sev[static_cast<std::size_t>(j) % sev.size()],
                                                        derive_seed(seed, "crash_style/" + sj)));
                    calm_styles.push_back(synth_source(mc, true, 0.0, derive_seed(seed, "calm_style/" + sj)));
                }
            }
            auto run = [&](const std::string& kind, const std::vector<Source>& targets,
                           const std::vector<Source>& styles) {
                for (const auto& t : targets)
                    for (const auto& s : styles)
                        records.push_back(intervention_record(params, cfg, seed, kind, layer, t,
                                                              std::span<const double>(s.values), s.label));
                for (const auto& t : targets)
                    records.push_back(intervention_record(params, cfg, seed, "control", layer, t,
                                                          std::span<const double>(t.values), t.label));
            };
            if (cfg.id != ExperimentId::suppress) run("crash_into_calm", calm, crash_styles);
            run("calm_into_crash", crash, calm_styles);
        }
    }
    return records;
}

json control_summary(const json& config, const json& records) {
    const double tol = config.at("control_tolerance").get<double>();
    std::size_t count = 0;
    double worst = 0.0;
    for (const auto& r : records) {
        if (r.at("kind") != "control") continue;
        ++count;
        const double shift = std::abs(r.at("intervened_terminal").get<double>() - r.at("baseline_terminal").get<double>());
        const double sd = r.at("target_std").get<double>();
        worst = std::max(worst, sd > 0 ? shift / sd : (shift > 0 ? std::numeric_limits<double>::infinity() : 0.0));
    }
    return json{{"count", count}, {"max_shift_ratio", worst}, {"tolerance", tol}, {"passed", count > 0 && worst < tol}};
}

json rate(std::size_t hits, std::size_t runs, const char* hit_name) {
    return json{{"runs", runs}, {hit_name, hits}, {"rate", runs ? static_cast<double>(hits) / static_cast<double>(runs) : 0.0}};
}

json summarize_steering(const json& config, const json& records) {
    std::map<std::pair<int, int>, std::array<std::size_t, 4>> groups;  // down runs, lowered, up runs, raised
    for (const auto& r : records) {
        const std::string kind = r.at("kind");
        if (kind == "control") continue;
        auto& g = groups[{r.at("n_layers").get<int>(), r.at("layer").get<int>()}];
        const double b = r.at("baseline_terminal"), i = r.at("intervened_terminal");
        if (kind == "crash_into_calm") {
            ++g[0];
            g[1] += i < b;
        } else {
            ++g[2];
            g[3] += i > b;
        }
    }
    json out = json::array();
    for (const auto& [key, g] : groups) {
        const std::size_t runs = g[0] + g[2];
        out.push_back(json{{"n_layers", key.first},
                           {"layer", key.second},
                           {"crash_into_calm", rate(g[1], g[0], "lowered")},
                           {"calm_into_crash", rate(g[3], g[2], "raised")},
                           {"direction_rate", runs ? static_cast<double>(g[1] + g[3]) / static_cast<double>(runs) : 0.0}});
    }
    return json{{"groups", out}, {"controls", control_summary(config, records)}};
}

json dose_records(const ExperimentConfig& cfg, const Parameters& params) {
    const ModelConfig& mc = params.config();
    json records = json::array();
    for (int layer : resolve_layers(cfg, mc)) {
        for (std::uint64_t seed : cfg.seeds) {
            const Source target = synth_source(mc, true, 0.0, derive_seed(seed, "calm_target"));
            for (double s : cfg.severities) {
                const SemanticSignature sig = ensemble_signature(params, s, cfg.style_ensemble, seed, layer);
                json rec = intervention_record(params, cfg, seed, "dose", layer, target, sig, sig.label);
                rec["severity"] = s;
                records.push_back(std::move(rec));
            }
            records.push_back(intervention_record(params, cfg, seed, "control", layer, target,
                                                  std::span<const double>(target.values), target.label));
        }
    }
    return records;
}

bool strictly(const std::vector<double>& v, bool increasing) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (increasing ? !(v[i] > v[i - 1]) : !(v[i] < v[i - 1])) return false;
    return true;
}

/// Records of one kind grouped by (layer, seed) in first-seen order.
std::vector<std::pair<std::pair<int, std::uint64_t>, std::vector<const json*>>> by_layer_seed(const json& records,
                                                                                             const std::string& kind) {
    std::vector<std::pair<std::pair<int, std::uint64_t>, std::vector<const json*>>> out;
    for (const auto& r : records) {
        if (r.at("kind") != kind) continue;
        const std::pair<int, std::uint64_t> key{r.at("layer").get<int>(), r.at("seed").get<std::uint64_t>()};
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& e) { return e.first == key; });
        if (it == out.end()) {
            out.push_back({key, {}});
            it = std::prev(out.end());
        }
        it->second.push_back(&r);
    }
    return out;
}

json summarize_dose(const json& config, const json& records) {
    std::map<int, json> layers;
    for (const auto& [key, recs] : by_layer_seed(records, "dose")) {
        std::vector<double> med, width;
        for (const json* r : recs) {
            med.push_back(r->at("intervened_terminal"));
            width.push_back(r->at("band90_width"));
        }
        json& g = layers[key.first];
        if (g.is_null()) g = json{{"layer", key.first}, {"per_seed", json::array()}};
        g["per_seed"].push_back(json{{"seed", key.second},
                                     {"median_terminal", med},
                                     {"band90_width", width},
                                     {"median_decreasing", strictly(med, false)},
                                     {"width_increasing", strictly(width, true)}});
    }
    json out = json::array();
    for (auto& [layer, g] : layers) {
        std::size_t n = 0, m = 0, w = 0;
        for (const auto& s : g["per_seed"]) {
            ++n;
            m += s["median_decreasing"].get<bool>();
            w += s["width_increasing"].get<bool>();
        }
        g["median_decreasing_rate"] = n ? static_cast<double>(m) / static_cast<double>(n) : 0.0;
        g["width_increasing_rate"] = n ? static_cast<double>(w) / static_cast<double>(n) : 0.0;
        out.push_back(g);
    }
    return json{{"groups", out}, {"controls", control_summary(config, records)}};
}

json cross_records(const ExperimentConfig& cfg, const Parameters& params) {
    const ModelConfig& mc = params.config();
    const auto real = load_real_data(cfg);
    json records = json::array();
    for (int layer : resolve_layers(cfg, mc)) {
        for (std::uint64_t seed : cfg.seeds) {
            Source target;
            std::vector<Source> styles;
            if (real) {
                target = window_sources(*real, cfg.target_windows, SemanticType::calm, mc.context_len).front();
                styles = window_sources(*real, cfg.style_windows, SemanticType::crash, mc.context_len);
                for (std::size_t i = 0; i < styles.size(); ++i) {
                    json rec = intervention_record(params, cfg, seed, "cross", layer, target,
                                                   std::span<const double>(styles[i].values), styles[i].label);
                    rec["effect_depth"] = rec["baseline_terminal"].get<double>() - rec["intervened_terminal"].get<double>();
                    records.push_back(std::move(rec));
                }
            } else {
                target = synth_source(mc, true, 0.0, derive_seed(seed, "calm_target"));
                for (double s : cfg.severities) {
                    const SemanticSignature sig = ensemble_signature(params, s, cfg.style_ensemble, seed, layer);
                    json rec = intervention_record(params, cfg, seed, "cross", layer, target, sig, sig.label);
                    rec["severity"] = s;
                    rec["effect_depth"] = rec["baseline_terminal"].get<double>() - rec["intervened_terminal"].get<double>();
                    records.push_back(std::move(rec));
                }
            }
            records.push_back(intervention_record(params, cfg, seed, "control", layer, target,
                                                  std::span<const double>(target.values), target.label));
        }
    }
    return records;
}

json summarize_cross(const json& config, const json& records) {
    const std::string mode = config.at("norm_mode");
    const char* modes[] = {"mean_and_std", "mean_only", "std_only"};
    std::map<int, json> layers;
    for (const auto& [key, recs] : by_layer_seed(records, "cross")) {
        std::vector<double> depth;
        std::map<std::string, std::vector<double>> norms;
        for (const json* r : recs) {
            depth.push_back(r->at("effect_depth"));
            for (const char* m : modes) norms[m].push_back(r->at("norms").at(m));
        }
        json per{{"seed", key.second}, {"effect_depth", depth}, {"signature_norm", norms[mode]}};
        json by_mode;
        for (const char* m : modes) {
            const double rho = spearman(norms[m], depth);
            by_mode[m] = std::isfinite(rho) ? json(rho) : json(nullptr);
        }
        per["spearman"] = by_mode[mode];
        per["spearman_by_mode"] = by_mode;
        per["deepest_at_max_severity"] =
            depth.size() >= 2 && std::max_element(depth.begin(), depth.end()) == std::prev(depth.end());
        per["last_deeper_than_first"] = depth.size() >= 2 && depth.back() > depth.front();
        json& g = layers[key.first];
        if (g.is_null()) g = json{{"layer", key.first}, {"per_seed", json::array()}};
        g["per_seed"].push_back(per);
    }
    json out = json::array();
    for (auto& [layer, g] : layers) {
        json means;
        for (const char* m : modes) {
            double s = 0.0;
            std::size_t n = 0;
            for (const auto& p : g["per_seed"])
                if (!p["spearman_by_mode"][m].is_null()) {
                    s += p["spearman_by_mode"][m].get<double>();
                    ++n;
                }
            means[m] = n ? json(s / static_cast<double>(n)) : json(nullptr);
        }
        std::size_t deeper = 0, n = 0;
        for (const auto& p : g["per_seed"]) {
            ++n;
            deeper += p["last_deeper_than_first"].get<bool>();
        }
        g["norm_mode"] = mode;
        g["mean_spearman"] = means[mode];
        g["mean_spearman_by_mode"] = means;
        g["last_deeper_than_first_rate"] = n ? static_cast<double>(deeper) / static_cast<double>(n) : 0.0;
        out.push_back(g);
    }
    return json{{"groups", out}, {"controls", control_summary(config, records)}};
}

std::vector<std::vector<ActivationTensor>> layer_activations(const Parameters& params,
                                                             const std::vector<std::vector<double>>& set) {
    std::vector<std::vector<ActivationTensor>> by_layer(static_cast<std::size_t>(params.config().n_layers));
    for (const auto& ctx : set) {
        ForwardResult fr = forward(params, ctx);
        for (std::size_t l = 0; l < by_layer.size(); ++l) by_layer[l].push_back(std::move(fr.activations[l]));
    }
    return by_layer;
}

json geometry_records(const ExperimentConfig& cfg, const Parameters& params) {
    const ModelConfig& mc = params.config();
    const int L = mc.n_layers;
    const auto T = static_cast<std::size_t>(mc.context_len);
    json records = json::array();
    for (std::uint64_t seed : cfg.seeds) {
        auto make_set = [&](bool calm, double s, const std::string& tag) {
            std::vector<std::vector<double>> out;
            for (int i = 0; i < cfg.set_size; ++i)
                out.push_back(synthetic_context(s, calm, T, derive_seed(seed, "geo/" + tag + "/" + std::to_string(i))));
            return out;
        };
        std::vector<std::vector<Mat>> vecs;  // per set, per layer
        auto add = [&](const std::vector<std::vector<double>>& set) {
            const auto acts = layer_activations(params, set);
            std::vector<Mat> v;
            for (const auto& a : acts) v.push_back(gather_vectors(a, cfg.vector_mode));
            vecs.push_back(std::move(v));
            return vecs.size() - 1;
        };
        const std::size_t a = add(make_set(false, cfg.crash_pair[0], "crash_a"));
        const std::size_t b = add(make_set(false, cfg.crash_pair[1], "crash_b"));
        const std::size_t c = add(make_set(true, 0.0, "calm"));
        std::vector<std::size_t> sev;
        for (double s : cfg.severities) sev.push_back(add(make_set(false, s, "severity/" + format_double(s))));

        auto table = [&](std::size_t x, std::size_t y, int k) {
            std::vector<double> v;
            for (int l = 0; l < L; ++l)
                v.push_back(pooled_similarity(vecs[x][static_cast<std::size_t>(l)], vecs[y][static_cast<std::size_t>(l)], k));
            return v;
        };
        for (int k : cfg.k_values) {
            auto rec = [&](const std::string& pair, std::vector<double> values) {
                return json{{"seed", seed}, {"kind", "similarity"}, {"k", k}, {"pair", pair}, {"values", values}};
            };
            records.push_back(rec("self", table(a, a, k)));
            records.push_back(rec("crash_crash", table(a, b, k)));
            records.push_back(rec("crash_calm", table(a, c, k)));
            for (std::size_t i = 0; i < sev.size(); ++i) {
                json r = rec("severity_vs_calm", table(sev[i], c, k));
                r["severity"] = cfg.severities[i];
                records.push_back(std::move(r));
                if (i > 0) {
                    json rb = rec("severity_vs_base", table(sev[0], sev[i], k));
                    rb["severity"] = cfg.severities[i];
                    records.push_back(std::move(rb));
                }
            }
        }
        if (cfg.id == ExperimentId::geometry_heatmap) {
            const int k = cfg.k_values.front();
            for (const auto& [pair, y] : {std::pair<std::string, std::size_t>{"crash_calm", c}, {"crash_crash", b}}) {
                json m = json::array();
                for (int i = 0; i < L; ++i) {
                    json row = json::array();
                    for (int j = 0; j < L; ++j)
                        row.push_back(pooled_similarity(vecs[a][static_cast<std::size_t>(i)],
                                                        vecs[y][static_cast<std::size_t>(j)], k));
                    m.push_back(row);
                }
                records.push_back(json{{"seed", seed}, {"kind", "matrix"}, {"k", k}, {"pair", pair}, {"values", m}});
            }
        }
    }
    return records;
}

std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows) {
    std::vector<double> out(rows.empty() ? 0 : rows.front().size(), 0.0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i] / static_cast<double>(rows.size());
    return out;
}

json summarize_geometry(const json& config, const json& records) {
    const std::vector<double> severities = config.at("severities");
    json per_k = json::array();
    double worst_self = 0.0;
    std::size_t n_self = 0;
    for (int k : config.at("k_values").get<std::vector<int>>()) {
        std::map<std::string, std::vector<std::vector<double>>> pairs;
        std::map<double, std::vector<std::vector<double>>> vs_calm, vs_base;
        std::map<std::uint64_t, std::map<std::string, std::vector<double>>> by_seed;
        std::map<std::uint64_t, std::vector<double>> calm_deep;
        for (const auto& r : records) {
            if (r.at("kind") != "similarity" || r.at("k").get<int>() != k) continue;
            const std::string pair = r.at("pair");
            const std::vector<double> v = r.at("values");
            const std::uint64_t seed = r.at("seed");
            if (pair == "self") {
                for (double x : v) worst_self = std::max(worst_self, std::abs(x - 1.0));
                ++n_self;
            } else if (pair == "severity_vs_calm") {
                vs_calm[r.at("severity").get<double>()].push_back(v);
                calm_deep[seed].push_back(v.back());
            } else if (pair == "severity_vs_base") {
                vs_base[r.at("severity").get<double>()].push_back(v);
            } else {
                pairs[pair].push_back(v);
                by_seed[seed][pair] = v;
            }
        }
        std::size_t sep = 0, dec = 0;
        for (const auto& [seed, m] : by_seed) sep += m.at("crash_crash").back() > m.at("crash_calm").back();
        for (const auto& [seed, v] : calm_deep) dec += strictly(v, false);
        json g{{"k", k},
               {"crash_crash_mean", mean_rows(pairs["crash_crash"])},
               {"crash_calm_mean", mean_rows(pairs["crash_calm"])},
               {"deepest_separation_rate", by_seed.empty() ? 0.0 : static_cast<double>(sep) / static_cast<double>(by_seed.size())},
               {"calm_similarity_decreasing_rate",
                calm_deep.empty() ? 0.0 : static_cast<double>(dec) / static_cast<double>(calm_deep.size())}};
        json sc = json::array(), sb = json::array();
        for (double s : severities) {
            if (vs_calm.count(s)) sc.push_back(json{{"severity", s}, {"mean", mean_rows(vs_calm[s])}});
            if (vs_base.count(s)) sb.push_back(json{{"severity", s}, {"mean", mean_rows(vs_base[s])}});
        }
        g["severity_vs_calm"] = sc;
        g["severity_vs_base"] = sb;
        per_k.push_back(g);
    }
    json out{{"groups", per_k},
             {"controls", json{{"count", n_self}, {"max_self_deviation", worst_self}, {"passed", n_self > 0 && worst_self < 1e-9}}}};
    std::map<std::string, std::vector<std::vector<std::vector<double>>>> mats;
    for (const auto& r : records)
        if (r.at("kind") == "matrix") mats[r.at("pair")].push_back(r.at("values"));
    if (!mats.empty()) {
        json hm;
        for (const auto& [pair, list] : mats) {
            const std::size_t n = list.front().size();
            std::vector<std::vector<double>> mean(n, std::vector<double>(n, 0.0));
            for (const auto& m : list)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) mean[i][j] += m[i][j] / static_cast<double>(list.size());
            hm[pair] = mean;
        }
        out["heatmaps"] = hm;
    }
    return out;
}

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

ExperimentResult finish(const ExperimentConfig& cfg, json records) {
    ExperimentResult r;
    r.config = cfg.to_json();
    r.records = std::move(records);
    r.summary = summarize(r.config, r.records);
    return r;
}

SimilarityMatrix matrix_from(const std::vector<std::vector<double>>& rows, std::vector<std::string> row_labels,
                             std::vector<std::string> col_labels) {
    SimilarityMatrix m{std::move(row_labels), std::move(col_labels),
                       Mat(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()))};
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

std::vector<std::string> layer_names(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t l = 1; l <= n; ++l) out.push_back("layer_" + std::to_string(l));
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

}  // namespace

std::string to_string(ExperimentId id) { return kIds[static_cast<int>(id)]; }

ExperimentId experiment_id_from_string(const std::string& s) {
    for (int i = 0; i < 8; ++i)
        if (s == kIds[i]) return static_cast<ExperimentId>(i);
    throw std::invalid_argument("unknown experiment id '" + s + "'");
}

json ExperimentConfig::to_json() const {
    return json{{"experiment", tsteer::to_string(id)},
                {"checkpoint", checkpoint},
                {"train_if_missing", train_if_missing},
                {"checkpoint_dir", checkpoint_dir},
                {"model", model.to_json()},
                {"dataset", dataset.to_json()},
                {"train", train.to_json()},
                {"csv", csv},
                {"catalog", catalog},
                {"target_windows", target_windows},
                {"style_windows", style_windows},
                {"layers", layers},
                {"severities", severities},
                {"seeds", seeds},
                {"n_targets", n_targets},
                {"n_styles", n_styles},
                {"n_samples", n_samples},
                {"epsilon", epsilon},
                {"style_ensemble", style_ensemble},
                {"norm_mode", tsteer::to_string(norm_mode)},
                {"control_tolerance", control_tolerance},
                {"set_size", set_size},
                {"crash_pair", crash_pair},
                {"k_values", k_values},
                {"vector_mode", vector_mode_name(vector_mode)},
                {"sizes", sizes},
                {"plot_limit", plot_limit}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    static const std::set<std::string> known{
        "experiment", "checkpoint",  "train_if_missing", "checkpoint_dir",    "model",     "dataset",
        "train",      "csv",         "catalog",          "target_windows",    "style_windows", "layers",
        "severities", "seeds",       "output_dir",       "n_targets",         "n_styles",  "n_samples",
        "epsilon",    "style_ensemble", "norm_mode",     "control_tolerance", "set_size",  "crash_pair",
        "k_values",   "vector_mode", "sizes",            "plot_limit"};
    if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");

    ExperimentConfig c;
    c.id = experiment_id_from_string(j.at("experiment").get<std::string>());
    c.seeds = {0, 1, 2, 3, 4};
    switch (c.id) {
        case ExperimentId::steer:
        case ExperimentId::suppress:
        case ExperimentId::layer_sweep:
        case ExperimentId::size_sweep: c.severities = {1.0, 2.0}; break;
        case ExperimentId::dose_response:
            c.severities = {0.2, 1.0, 2.0};
            c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
            break;
        case ExperimentId::cross_crash:
            c.severities = {0.2, 0.5, 1.0, 1.5, 2.0};
            c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
            break;
        case ExperimentId::geometry_heatmap:
        case ExperimentId::pca_ablation: c.severities = {0.2, 1.0, 1.5, 2.0}; break;
    }
    c.k_values = c.id == ExperimentId::pca_ablation ? std::vector<int>{20, 30, 40, 50} : std::vector<int>{20};
    if (c.id == ExperimentId::size_sweep) c.sizes = {2, 4, 6};

    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.train_if_missing = j.value("train_if_missing", c.train_if_missing);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("dataset")) c.dataset = DatasetSpec::from_json(j.at("dataset"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.csv = j.value("csv", c.csv);
    c.catalog = j.value("catalog", c.catalog);
    c.target_windows = j.value("target_windows", c.target_windows);
    c.style_windows = j.value("style_windows", c.style_windows);
    c.layers = j.value("layers", c.layers);
    c.severities = j.value("severities", c.severities);
    c.seeds = j.value("seeds", c.seeds);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.n_targets = j.value("n_targets", c.n_targets);
    c.n_styles = j.value("n_styles", c.n_styles);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.style_ensemble = j.value("style_ensemble", c.style_ensemble);
    if (j.contains("norm_mode")) c.norm_mode = norm_mode_from_string(j.at("norm_mode").get<std::string>());
    c.control_tolerance = j.value("control_tolerance", c.control_tolerance);
    c.set_size = j.value("set_size", c.set_size);
    c.crash_pair = j.value("crash_pair", c.crash_pair);
    c.k_values = j.value("k_values", c.k_values);
    if (j.contains("vector_mode")) c.vector_mode = vector_mode_from_string(j.at("vector_mode").get<std::string>());
    c.sizes = j.value("sizes", c.sizes);
    c.plot_limit = j.value("plot_limit", c.plot_limit);
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("experiment config: " + m); };
    model.validate();
    if (seeds.empty()) fail("seeds is empty");
    if (severities.empty()) fail("severities is empty");
    for (double s : severities)
        if (!(s >= 0.0) || !std::isfinite(s)) fail("severities must be finite and >= 0");
    if (checkpoint.empty() && id != ExperimentId::size_sweep) fail("checkpoint path is required");
    if (!checkpoint.empty() && !train_if_missing && id != ExperimentId::size_sweep &&
        !std::filesystem::exists(checkpoint))
        fail("checkpoint '" + checkpoint + "' does not exist");
    if (!csv.empty() && !std::filesystem::exists(csv)) fail("csv '" + csv + "' does not exist");
    if (!catalog.empty() && !std::filesystem::exists(catalog)) fail("catalog '" + catalog + "' does not exist");
    if (n_targets < 1 || n_styles < 1) fail("n_targets and n_styles must be >= 1");
    if (n_samples < 1) fail("n_samples must be >= 1");
    if (!(epsilon > 0.0)) fail("epsilon must be > 0");
    if (style_ensemble < 1) fail("style_ensemble must be >= 1");
    if (!(control_tolerance > 0.0)) fail("control_tolerance must be > 0");
    if (id == ExperimentId::dose_response && !std::is_sorted(severities.begin(), severities.end()))
        fail("dose_response severities must be ascending");
    if (id == ExperimentId::cross_crash && csv.empty() && severities.size() < 2)
        fail("cross_crash needs at least 2 crash sources");
    if (is_geometry(id)) {
        if (k_values.empty()) fail("k_values is empty");
        if (set_size < 1) fail("set_size must be >= 1");
        if (crash_pair.size() != 2) fail("crash_pair must hold two severities");
    }
    if (id == ExperimentId::size_sweep) {
        if (sizes.empty()) fail("sizes is empty");
        for (int s : sizes)
            if (s < 1) fail("sizes must be >= 1");
        if (checkpoint_dir.empty() && checkpoint.empty()) fail("size_sweep needs checkpoint_dir");
        if (!train_if_missing)
            for (int s : sizes)
                if (!std::filesystem::exists(sized_checkpoint_path(*this, s)))
                    fail("missing " + sized_checkpoint_path(*this, s).string() + " and train_if_missing is false");
    }
    if (plot_limit < 0) fail("plot_limit must be >= 0");
}

bool ExperimentResult::controls_passed() const {
    return summary.contains("controls") && summary["controls"].value("passed", false);
}

Parameters resolve_checkpoint(const std::filesystem::path& path, const ModelConfig& model, const DatasetSpec& data,
                              const TrainConfig& tc, bool train_if_missing) {
    if (std::filesystem::exists(path)) return load_checkpoint(path);
    if (!train_if_missing) throw std::invalid_argument("checkpoint '" + path.string() + "' does not exist");
    spdlog::info("training {} ({} layers, {} steps)", path.string(), model.n_layers, tc.steps);
    const auto dataset = make_regime_dataset(model, data);
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train(model, dataset, tc, [&](int step, double l) {
        if (step % 500 == 0) spdlog::info("  step {} loss {:.4f}", step, l);
    });
    spdlog::info("trained in {:.1f}s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    save_checkpoint(r.params, tmp);
    std::filesystem::rename(tmp, path);
    return std::move(r.params);
}

std::filesystem::path sized_checkpoint_path(const ExperimentConfig& cfg, int n_layers) {
    ModelConfig m = cfg.model;
    m.n_layers = n_layers;
    const std::string key = m.to_json().dump() + cfg.dataset.to_json().dump() + cfg.train.to_json().dump();
    std::filesystem::path dir = cfg.checkpoint_dir;
    if (dir.empty()) dir = std::filesystem::path(cfg.checkpoint).parent_path();
    return dir / ("tsteer-L" + std::to_string(n_layers) + "-" + hex16(fnv1a64(key)) + ".ttfm");
}

ExperimentResult run_steering(const ExperimentConfig& cfg, const Parameters& params) {
    return finish(cfg, steering_records(cfg, params));
}

ExperimentResult run_dose_response(const ExperimentConfig& cfg, const Parameters& params) {
    return finish(cfg, dose_records(cfg, params));
}

ExperimentResult run_cross_crash(const ExperimentConfig& cfg, const Parameters& params) {
    return finish(cfg, cross_records(cfg, params));
}

ExperimentResult run_geometry_suite(const ExperimentConfig& cfg, const Parameters& params) {
    return finish(cfg, geometry_records(cfg, params));
}

ExperimentResult run_size_sweep(const ExperimentConfig& cfg) {
    json records = json::array();
    json hashes = json::object();
    for (int n_layers : cfg.sizes) {
        ExperimentConfig sized = cfg;
        sized.model.n_layers = n_layers;
        const Parameters params = resolve_checkpoint(sized_checkpoint_path(cfg, n_layers), sized.model, cfg.dataset,
                                                     cfg.train, cfg.train_if_missing);
        hashes[std::to_string(n_layers)] = checkpoint_hash(params);
        sized.layers.clear();
        for (auto& r : steering_records(sized, params)) records.push_back(std::move(r));
    }
    ExperimentResult r = finish(cfg, std::move(records));
    r.provenance["checkpoint_hashes"] = hashes;
    return r;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentResult r;
    if (cfg.id == ExperimentId::size_sweep) {
        r = run_size_sweep(cfg);
    } else {
        const Parameters params = resolve_checkpoint(cfg.checkpoint, cfg.model, cfg.dataset, cfg.train, cfg.train_if_missing);
        switch (cfg.id) {
            case ExperimentId::dose_response: r = run_dose_response(cfg, params); break;
            case ExperimentId::cross_crash: r = run_cross_crash(cfg, params); break;
            case ExperimentId::geometry_heatmap:
            case ExperimentId::pca_ablation: r = run_geometry_suite(cfg, params); break;
            default: r = run_steering(cfg, params); break;
        }
        r.provenance["checkpoint_hash"] = checkpoint_hash(params);
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

json summarize(const json& config, const json& records) {
    const ExperimentId id = experiment_id_from_string(config.at("experiment").get<std::string>());
    json s;
    if (is_steering(id)) s = summarize_steering(config, records);
    else if (id == ExperimentId::dose_response) s = summarize_dose(config, records);
    else if (id == ExperimentId::cross_crash) s = summarize_cross(config, records);
    else s = summarize_geometry(config, records);
    s["experiment"] = to_string(id);
    s["records"] = records.size();
    return s;
}

std::vector<NamedFile> emit_tables(const ExperimentResult& r) {
    const ExperimentId id = experiment_id_from_string(r.config.at("experiment").get<std::string>());
    std::vector<NamedFile> out;
    if (is_steering(id)) {
        std::string csv = "n_layers,layer,seed,kind,target,style,baseline_terminal,intervened_terminal,effect\n";
        for (const auto& rec : r.records) {
            const double b = rec["baseline_terminal"], i = rec["intervened_terminal"];
            csv += std::to_string(rec["n_layers"].get<int>()) + "," + std::to_string(rec["layer"].get<int>()) + "," +
                   std::to_string(rec["seed"].get<std::uint64_t>()) + "," + rec["kind"].get<std::string>() + "," +
                   csv_field(rec["target"]) + "," + csv_field(rec["style"]) + "," + format_double(b) + "," +
                   format_double(i) + "," + format_double(i - b) + "\n";
        }
        out.emplace_back("effects.csv", csv);
    } else if (id == ExperimentId::dose_response || id == ExperimentId::cross_crash) {
        std::string csv = "layer,seed,kind,style,severity,baseline_terminal,median_terminal,band90_width,"
                          "norm_mean_and_std,norm_mean_only,norm_std_only\n";
        for (const auto& rec : r.records) {
            const auto& n = rec["norms"];
            csv += std::to_string(rec["layer"].get<int>()) + "," + std::to_string(rec["seed"].get<std::uint64_t>()) +
                   "," + rec["kind"].get<std::string>() + "," + csv_field(rec["style"]) + "," +
                   (rec.contains("severity") ? format_double(rec["severity"]) : std::string()) + "," +
                   format_double(rec["baseline_terminal"]) + "," + format_double(rec["intervened_terminal"]) + "," +
                   format_double(rec["band90_width"]) + "," + format_double(n["mean_and_std"]) + "," +
                   format_double(n["mean_only"]) + "," + format_double(n["std_only"]) + "\n";
        }
        out.emplace_back(id == ExperimentId::dose_response ? "dose_response.csv" : "cross_crash.csv", csv);
    } else {
        for (const auto& g : r.summary["groups"]) {
            std::vector<std::vector<double>> rows{g["crash_crash_mean"], g["crash_calm_mean"]};
            std::vector<std::string> labels{"crash_crash", "crash_calm"};
            for (const auto& s : g["severity_vs_calm"]) {
                rows.push_back(s["mean"]);
                labels.push_back("s" + format_double(s["severity"]) + "_vs_calm");
            }
            for (const auto& s : g["severity_vs_base"]) {
                rows.push_back(s["mean"]);
                labels.push_back("s" + format_double(s["severity"]) + "_vs_base");
            }
            const std::size_t L = rows.front().size();
            out.emplace_back("similarity_k" + std::to_string(g["k"].get<int>()) + ".csv",
                             matrix_from(rows, labels, layer_names(L)).to_csv());
        }
        if (r.summary.contains("heatmaps"))
            for (const auto& [pair, m] : r.summary["heatmaps"].items()) {
                const std::vector<std::vector<double>> rows = m;
                out.emplace_back("heatmap_" + pair + ".csv",
                                 matrix_from(rows, layer_names(rows.size()), layer_names(rows.size())).to_csv());
            }
    }
    return out;
}

std::vector<NamedFile> emit_plots(const ExperimentResult& r) {
    const ExperimentId id = experiment_id_from_string(r.config.at("experiment").get<std::string>());
    const int limit = r.config.value("plot_limit", 4);
    std::vector<NamedFile> out;
    if (!is_geometry(id)) {
        int n = 0;
        bool control_done = false;
        for (const auto& rec : r.records) {
            const bool control = rec["kind"] == "control";
            if (control ? control_done : n >= limit) continue;
            ForecastChart c;
            c.title = rec["kind"].get<std::string>() + ", layer " + std::to_string(rec["layer"].get<int>()) + ": " +
                      rec["style"].get<std::string>() + " into " + rec["target"].get<std::string>();
            c.context = rec["context"].get<std::vector<double>>();
            c.baseline = bands_from_json(rec["baseline"]);
            c.intervened = bands_from_json(rec["intervened"]);
            const std::string name = control ? "forecast_control.svg" : "forecast_" + std::to_string(n) + ".svg";
            out.emplace_back(name, forecast_chart_svg(c));
            if (control) control_done = true;
            else ++n;
        }
        return out;
    }
    for (const auto& g : r.summary["groups"]) {
        std::vector<std::vector<double>> rows{g["crash_crash_mean"], g["crash_calm_mean"]};
        std::vector<std::string> labels{"crash_crash", "crash_calm"};
        for (const auto& s : g["severity_vs_calm"]) {
            rows.push_back(s["mean"]);
            labels.push_back("s" + format_double(s["severity"]) + "_vs_calm");
        }
        const int k = g["k"];
        out.emplace_back("similarity_k" + std::to_string(k) + ".svg",
                         heatmap_svg(matrix_from(rows, labels, layer_names(rows.front().size())),
                                     "pooled-PCA cosine similarity, k=" + std::to_string(k)));
    }
    if (r.summary.contains("heatmaps"))
        for (const auto& [pair, m] : r.summary["heatmaps"].items()) {
            const std::vector<std::vector<double>> rows = m;
            out.emplace_back("heatmap_" + pair + ".svg",
                             heatmap_svg(matrix_from(rows, layer_names(rows.size()), layer_names(rows.size())),
                                         pair + " layer x layer similarity"));
        }
    return out;
}

namespace {

json result_document(const ExperimentResult& r) {
    return json{{"config", r.config}, {"records", r.records}, {"summary", r.summary}, {"provenance", r.provenance}};
}

}  // namespace

void write_result(const ExperimentResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file(dir / "result.json", result_document(r).dump(1) + "\n");
    for (const auto& [name, body] : emit_tables(r)) write_file(dir / name, body);
    for (const auto& [name, body] : emit_plots(r)) write_file(dir / name, body);
    write_file(dir / "timing.json", json{{"wall_seconds", r.wall_seconds}}.dump(1) + "\n");
}

VerifyReport verify_result_dir(const std::filesystem::path& dir) {
    VerifyReport rep;
    ExperimentResult r;
    try {
        const json doc = json::parse(read_file(dir / "result.json"));
        r.config = doc.at("config");
        r.records = doc.at("records");
        r.summary = doc.at("summary");
        r.provenance = doc.value("provenance", json::object());
    } catch (const std::exception& e) {
        rep.problems.push_back(std::string("cannot read result.json: ") + e.what());
        return rep;
    }
    try {
        ExperimentConfig::from_json(r.config);
    } catch (const std::exception& e) {
        rep.problems.push_back(std::string("config echo does not parse: ") + e.what());
    }
    if (!r.records.is_array() || r.records.empty()) rep.problems.push_back("no records");
    for (std::size_t i = 0; i < r.records.size(); ++i)
        if (!r.records[i].contains("seed")) rep.problems.push_back("record " + std::to_string(i) + " has no seed");
    if (!rep.ok()) return rep;

    try {
        const json recomputed = summarize(r.config, r.records);
        if (recomputed != r.summary) rep.problems.push_back("summary differs from the one recomputed from records");
        ExperimentResult fresh = r;
        fresh.summary = recomputed;
        auto compare = [&](const std::vector<NamedFile>& files) {
            for (const auto& [name, body] : files) {
                if (!std::filesystem::exists(dir / name)) rep.problems.push_back(name + " is missing");
                else if (read_file(dir / name) != body) rep.problems.push_back(name + " differs from regenerated output");
            }
        };
        compare(emit_tables(fresh));
        compare(emit_plots(fresh));
    } catch (const std::exception& e) {
        rep.problems.push_back(std::string("recomputation failed: ") + e.what());
    }
    if (!r.controls_passed()) rep.problems.push_back("identity controls failed");
    return rep;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) return std::numeric_limits<double>::quiet_NaN();
    auto ranks = [n](const std::vector<double>& v) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double mean = 0.5 * static_cast<double>(n + 1);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (ra[i] - mean) * (rb[i] - mean);
        saa += (ra[i] - mean) * (ra[i] - mean);
        sbb += (rb[i] - mean) * (rb[i] - mean);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

}  // namespace tsteer
