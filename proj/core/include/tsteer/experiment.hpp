#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsteer/dataset.hpp"
#include "tsteer/geometry.hpp"
#include "tsteer/model.hpp"
#include "tsteer/transplant.hpp"

namespace tsteer {

enum class ExperimentId {
    steer,
    suppress,
    dose_response,
    cross_crash,
    geometry_heatmap,
    layer_sweep,
    pca_ablation,
    size_sweep,
};

std::string to_string(ExperimentId id);
ExperimentId experiment_id_from_string(const std::string& s);

/// Every field has a per-experiment default; see docs/experiment_config.md.
struct ExperimentConfig {
    ExperimentId id = ExperimentId::steer;

    std::string checkpoint;          // TTFM path
    bool train_if_missing = false;   // train from model/dataset/train and write `checkpoint`
    std::string checkpoint_dir;      // size_sweep cache; defaults to the checkpoint's directory
    ModelConfig model;
    DatasetSpec dataset;
    TrainConfig train;

    // Optional real data. With a CSV, steering and cross_crash use catalog windows.
    std::string csv;
    std::string catalog;  // empty: built-in windows
    std::vector<std::string> target_windows;
    std::vector<std::string> style_windows;

    std::vector<int> layers;  // empty: mid layer (every layer for layer_sweep)
    std::vector<double> severities;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;

    int n_targets = 3;
    int n_styles = 3;
    std::size_t n_samples = 256;
    double epsilon = kDefaultEpsilon;
    int style_ensemble = 16;            // synthetic realizations averaged per severity signature
    NormMode norm_mode = NormMode::mean_and_std;
    double control_tolerance = 0.01;    // identity-control bound, fraction of the target's std

    int set_size = 8;                        // contexts per geometry set
    std::vector<double> crash_pair{1.0, 2.0};  // severities of the two crash sets
    std::vector<int> k_values;
    VectorMode vector_mode = VectorMode::tokens;

    std::vector<int> sizes;  // n_layers per size_sweep model
    int plot_limit = 4;

    /// The echo stored in results. Omits output_dir so reruns elsewhere match.
    nlohmann::json to_json() const;
    /// Fills unspecified fields with the defaults of the experiment named by "experiment".
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
    /// Throws std::invalid_argument on empty lists or missing referenced files.
    void validate() const;
};

struct ExperimentResult {
    nlohmann::json config;   // echo
    nlohmann::json records;  // array; every record carries "seed"
    nlohmann::json summary;  // summarize(config, records)
    nlohmann::json provenance = nlohmann::json::object();  // checkpoint hashes
    double wall_seconds = 0.0;

    bool controls_passed() const;
};

/// Loads the checkpoint, training it first when allowed and missing.
Parameters resolve_checkpoint(const std::filesystem::path& path, const ModelConfig& model, const DatasetSpec& data,
                              const TrainConfig& train, bool train_if_missing);

/// Path used by size_sweep for a given depth; includes a hash of the full training setup.
std::filesystem::path sized_checkpoint_path(const ExperimentConfig& cfg, int n_layers);

ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_steering(const ExperimentConfig& cfg, const Parameters& params);
ExperimentResult run_dose_response(const ExperimentConfig& cfg, const Parameters& params);
ExperimentResult run_cross_crash(const ExperimentConfig& cfg, const Parameters& params);
ExperimentResult run_geometry_suite(const ExperimentConfig& cfg, const Parameters& params);
ExperimentResult run_size_sweep(const ExperimentConfig& cfg);

/// Pure function of the echoed config and the records.
nlohmann::json summarize(const nlohmann::json& config, const nlohmann::json& records);

using NamedFile = std::pair<std::string, std::string>;
std::vector<NamedFile> emit_tables(const ExperimentResult& result);
std::vector<NamedFile> emit_plots(const ExperimentResult& result);

/// result.json, tables, plots and timing.json (the only file with wall-clock data).
void write_result(const ExperimentResult& result, const std::filesystem::path& dir);

struct VerifyReport {
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
};

/// Recomputes the summary, tables and plots from result.json and compares them
/// with the files on disk; also checks seeds on records and the controls.
VerifyReport verify_result_dir(const std::filesystem::path& dir);

/// Spearman rank correlation with average ranks for ties. NaN when either input is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace tsteer
