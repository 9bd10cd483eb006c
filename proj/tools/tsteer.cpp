#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "http_server.hpp"
#include "tsteer/checkpoint.hpp"
#include "tsteer/dataset.hpp"
#include "tsteer/experiment.hpp"
#include "tsteer/format.hpp"
#include "tsteer/geometry.hpp"
#include "tsteer/ingest.hpp"
#include "tsteer/regimegen.hpp"
#include "tsteer/service.hpp"
#include "tsteer/transplant.hpp"

using namespace tsteer;
using nlohmann::json;

namespace {

void emit(const std::string& out, const std::string& text) {
    if (out.empty() || out == "-") std::cout << text;
    else write_file(out, text);
}

/// Values from a CSV (date,value) or a headerless one-value-per-line file.
std::vector<double> read_values(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<double> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        const std::string field = comma == std::string::npos ? line : line.substr(comma + 1);
        try {
            std::size_t used = 0;
            const double v = std::stod(field, &used);
            if (used != field.size()) throw std::invalid_argument(field);
            out.push_back(v);
        } catch (const std::exception&) {
            if (out.empty() && n == 1) continue;  // header
            throw ParseError(n, "not a number: '" + field + "'");
        }
    }
    return out;
}

/// "calm:SEED", "crash:SEVERITY:SEED" or a file path.
std::vector<double> resolve_context(const std::string& spec, const ModelConfig& mc) {
    const auto T = static_cast<std::size_t>(mc.context_len);
    if (spec.rfind("calm:", 0) == 0) return synthetic_context(0.0, true, T, std::stoull(spec.substr(5)));
    if (spec.rfind("crash:", 0) == 0) {
        const auto colon = spec.find(':', 6);
        if (colon == std::string::npos) throw std::invalid_argument("expected crash:SEVERITY:SEED");
        return synthetic_context(std::stod(spec.substr(6, colon - 6)), false, T, std::stoull(spec.substr(colon + 1)));
    }
    std::vector<double> v = read_values(spec);
    if (v.size() < T)
        throw std::invalid_argument(spec + " has " + std::to_string(v.size()) + " values, need " + std::to_string(T));
    if (v.size() > T) v.erase(v.begin(), v.end() - static_cast<std::ptrdiff_t>(T));
    return v;
}

bool is_signature_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    char magic[4] = {};
    return f.read(magic, 4) && std::string(magic, 4) == "SSIG";
}

json bands_json(const ForecastDistribution& f) {
    return json{{"median", f.median}, {"q5", f.q5}, {"q25", f.q25}, {"q75", f.q75}, {"q95", f.q95}};
}

std::vector<ActivationTensor> load_dumps(const std::vector<std::string>& paths) {
    std::vector<ActivationTensor> out;
    for (const auto& p : paths) out.push_back(load_activation(p));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsteer: activation-statistics steering for a toy time-series transformer"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Simulate a calm or crash jump-diffusion series");
    std::string regime = "calm", gen_out;
    double severity = 1.0, x0 = 2000.0;
    std::size_t length = 256;
    std::uint64_t gen_seed = 0;
    bool raw = false;
    gen->add_option("--regime", regime, "calm or crash")->check(CLI::IsMember({"calm", "crash"}));
    gen->add_option("--severity", severity, "crash severity factor s >= 0");
    gen->add_option("--length", length, "number of prices including x0");
    gen->add_option("--x0", x0, "initial price");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out, "output path (stdout when omitted)");
    gen->add_flag("--raw", raw, "bare values, no header or dates");

    // ingest
    auto* ing = app.add_subcommand("ingest", "Slice a catalog window out of a price CSV");
    std::string csv, catalog_path, window, ing_out;
    std::size_t t_in = 128;
    ing->add_option("--csv", csv, "date,value CSV")->required();
    ing->add_option("--catalog", catalog_path, "catalog JSON (built-in windows when omitted)");
    ing->add_option("--window", window, "window name")->required();
    ing->add_option("--t-in", t_in, "context length");
    ing->add_option("--out", ing_out);

    // train
    auto* tr = app.add_subcommand("train", "Train a checkpoint on synthetic regimes");
    std::string train_config, train_out;
    int layers_override = 0, steps_override = 0;
    tr->add_option("--config", train_config, "JSON with optional model, dataset and train sections");
    tr->add_option("--layers", layers_override, "override model.n_layers");
    tr->add_option("--steps", steps_override, "override train.steps");
    tr->add_option("--out", train_out, "checkpoint path")->required();

    // intervene
    auto* iv = app.add_subcommand("intervene", "Transplant a style signature into a target and forecast");
    std::string ckpt, target, style, iv_out, save_sig;
    int layer = 0;
    double epsilon = kDefaultEpsilon;
    std::size_t samples = 256;
    std::uint64_t iv_seed = 0;
    iv->add_option("--checkpoint", ckpt)->required();
    iv->add_option("--target", target, "context file, calm:SEED or crash:S:SEED")->required();
    iv->add_option("--style", style, "context file, signature file, calm:SEED or crash:S:SEED")->required();
    iv->add_option("--layer", layer, "1..L (default: mid layer)");
    iv->add_option("--epsilon", epsilon);
    iv->add_option("--samples", samples);
    iv->add_option("--seed", iv_seed);
    iv->add_option("--out", iv_out, "JSON output (stdout when omitted)");
    iv->add_option("--save-signature", save_sig, "also write the style signature");

    // dump
    auto* dp = app.add_subcommand("dump", "Write the activation tensor of one layer");
    std::string dp_ckpt, dp_ctx, dp_out;
    int dp_layer = 1;
    dp->add_option("--checkpoint", dp_ckpt)->required();
    dp->add_option("--context", dp_ctx, "context file, calm:SEED or crash:S:SEED")->required();
    dp->add_option("--layer", dp_layer)->required();
    dp->add_option("--out", dp_out)->required();

    // similarity
    auto* sm = app.add_subcommand("similarity", "Pooled-PCA cosine similarity of two activation dump sets");
    std::vector<std::string> set_a, set_b;
    int k = 20;
    std::string mode = "tokens";
    sm->add_option("--a", set_a, "ACTD files")->required();
    sm->add_option("--b", set_b, "ACTD files")->required();
    sm->add_option("--k", k);
    sm->add_option("--mode", mode)->check(CLI::IsMember({"tokens", "time_averaged"}));

    // exp
    auto* ex = app.add_subcommand("exp", "Reproducible experiments");
    ex->require_subcommand(1);
    auto* ex_run = ex->add_subcommand("run", "Run an experiment");
    std::string ex_id, ex_config, ex_out;
    ex_run->add_option("id", ex_id, "steer | suppress | dose_response | cross_crash | geometry_heatmap | "
                                    "layer_sweep | pca_ablation | size_sweep")
        ->required();
    ex_run->add_option("--config", ex_config, "experiment JSON")->required();
    ex_run->add_option("--out", ex_out, "result directory (overrides output_dir)");
    auto* ex_verify = ex->add_subcommand("verify", "Recompute and check a result directory");
    std::string ex_dir;
    ex_verify->add_option("dir", ex_dir)->required();

    // serve
    auto* sv = app.add_subcommand("serve", "HTTP API over a checkpoint");
    std::string sv_ckpt, sv_catalog, sv_csv, host = "127.0.0.1", cors = "*";
    int port = 8080;
    sv->add_option("--checkpoint", sv_ckpt, "checkpoint (env TSTEER_CHECKPOINT)");
    sv->add_option("--catalog", sv_catalog);
    sv->add_option("--csv", sv_csv, "price CSV backing catalog windows");
    sv->add_option("--host", host);
    sv->add_option("--port", port, "port (env TSTEER_PORT)");
    sv->add_option("--cors-origin", cors);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const RegimeParams p = regime == "calm" ? calm_params() : crash_params(severity);
            PriceSeries s = simulate(p, SeriesSpec{length, x0, gen_seed});
            if (!raw) attach_daily_dates(s);
            emit(gen_out, series_to_csv(s, raw));
        } else if (ing->parsed()) {
            const PriceSeries s = fill_gaps(load_csv(csv));
            const RegimeCatalog cat = catalog_path.empty() ? RegimeCatalog::defaults() : RegimeCatalog::load_json(catalog_path);
            const RegimeWindow* w = cat.find(window);
            if (!w) throw std::invalid_argument("unknown window '" + window + "'");
            emit(ing_out, context_to_csv(slice_window(s, *w, t_in)));
        } else if (tr->parsed()) {
            json j = json::object();
            if (!train_config.empty()) j = json::parse(read_file(train_config));
            ModelConfig mc = j.contains("model") ? ModelConfig::from_json(j["model"]) : ModelConfig{};
            const DatasetSpec ds = j.contains("dataset") ? DatasetSpec::from_json(j["dataset"]) : DatasetSpec{};
            TrainConfig tc = j.contains("train") ? TrainConfig::from_json(j["train"]) : TrainConfig{};
            if (layers_override > 0) mc.n_layers = layers_override;
            if (steps_override > 0) tc.steps = steps_override;
            if (std::filesystem::exists(train_out)) std::filesystem::remove(train_out);
            const Parameters p = resolve_checkpoint(train_out, mc, ds, tc, true);
            std::cout << train_out << " " << checkpoint_hash(p) << "\n";
        } else if (iv->parsed()) {
            const Parameters p = load_checkpoint(ckpt);
            const ModelConfig& mc = p.config();
            const int l = layer == 0 ? mc.mid_layer() : layer;
            const std::vector<double> tgt = resolve_context(target, mc);
            SemanticSignature sig = is_signature_file(style) ? load_signature(style)
                                                             : context_signature(p, resolve_context(style, mc), l, style);
            const InterventionResult r = intervene(p, tgt, sig, l, epsilon);
            const ForecastDistribution base = sample_forecast(r.baseline_head, samples, iv_seed, r.stats);
            const ForecastDistribution intv = sample_forecast(r.intervened_head, samples, iv_seed, r.stats);
            if (!save_sig.empty()) save_signature(sig, save_sig);
            const json out{{"layer", l},
                           {"epsilon", epsilon},
                           {"n_samples", samples},
                           {"seed", iv_seed},
                           {"style", sig.label},
                           {"signature_norm", signature_norm(sig)},
                           {"baseline", bands_json(base)},
                           {"intervened", bands_json(intv)}};
            emit(iv_out, out.dump(1) + "\n");
        } else if (dp->parsed()) {
            const Parameters p = load_checkpoint(dp_ckpt);
            if (dp_layer < 1 || dp_layer > p.config().n_layers) throw std::invalid_argument("layer out of range");
            ForwardResult fr = forward(p, resolve_context(dp_ctx, p.config()));
            save_activation(fr.activations[static_cast<std::size_t>(dp_layer - 1)], dp_out);
        } else if (sm->parsed()) {
            const double v = dump_similarity(load_dumps(set_a), load_dumps(set_b), k,
                                             mode == "tokens" ? VectorMode::tokens : VectorMode::time_averaged);
            std::cout << format_double(v) << "\n";
        } else if (ex_run->parsed()) {
            ExperimentConfig cfg = ExperimentConfig::load(ex_config);
            if (to_string(cfg.id) != ex_id)
                throw std::invalid_argument("config declares experiment '" + to_string(cfg.id) + "', not '" + ex_id + "'");
            if (!ex_out.empty()) cfg.output_dir = ex_out;
            if (cfg.output_dir.empty()) throw std::invalid_argument("no output directory (output_dir or --out)");
            const ExperimentResult r = run_experiment(cfg);
            write_result(r, cfg.output_dir);
            std::cout << r.summary.dump(1) << "\n";
            if (!r.controls_passed()) {
                spdlog::error("identity controls failed; run is invalid");
                return 3;
            }
        } else if (ex_verify->parsed()) {
            const VerifyReport rep = verify_result_dir(ex_dir);
            for (const auto& p : rep.problems) std::cout << "FAIL " << p << "\n";
            std::cout << (rep.ok() ? "OK\n" : "");
            return rep.ok() ? 0 : 1;
        } else if (sv->parsed()) {
            if (const char* env = std::getenv("TSTEER_CHECKPOINT"); env && sv->count("--checkpoint") == 0) sv_ckpt = env;
            if (const char* env = std::getenv("TSTEER_PORT"); env && sv->count("--port") == 0) port = std::stoi(env);
            if (sv_ckpt.empty()) throw std::invalid_argument("no checkpoint (--checkpoint or TSTEER_CHECKPOINT)");
            SteerService service(ServiceOptions{cors});
            HttpServer server(service);
            const int bound = server.bind(host, port);
            if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
            // Listen right away; /api/* answers 503 until the checkpoint is in.
            std::thread loader([&] {
                try {
                    std::optional<PriceSeries> prices;
                    if (!sv_csv.empty()) prices = load_csv(sv_csv);
                    service.load(load_checkpoint(sv_ckpt),
                                 sv_catalog.empty() ? RegimeCatalog::defaults() : RegimeCatalog::load_json(sv_catalog),
                                 prices);
                    spdlog::info("loaded {}", sv_ckpt);
                } catch (const std::exception& e) {
                    spdlog::error("load failed: {}", e.what());
                    server.stop();
                }
            });
            spdlog::info("listening on {}:{}", host, bound);
            server.listen();
            loader.join();
            if (!service.ready()) return 1;
        }
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
