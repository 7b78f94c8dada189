#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "difl/data.hpp"
#include "difl/feature_index.hpp"
#include "difl/model_bank.hpp"

namespace difl {

struct Threshold {
    double max_position_m = 0.0;
    double max_rotation_deg = 0.0;
};

struct PrecisionRegimes {
    // high, medium, coarse
    std::vector<Threshold> thresholds{{0.25, 2.0}, {0.5, 5.0}, {5.0, 10.0}};

    // Each threshold must dominate the previous one in both components.
    void validate() const;
};

double position_error(const Pose& query, const Pose& reference);
// Relative rotation angle in degrees, in [0, 180]; inputs are normalized first.
double rotation_error(const Quaternion& query, const Quaternion& reference);
std::vector<bool> classify(double e_pos, double e_rot, const PrecisionRegimes& regimes);

struct RetrievalLogRow {
    std::string query_id;
    std::string retrieved_id;
    double distance = 0.0;
    double e_pos = 0.0;
    double e_rot = 0.0;

    friend bool operator==(const RetrievalLogRow&, const RetrievalLogRow&) = default;
};

struct SliceAccuracy {
    int64_t n_queries = 0;
    std::vector<double> accuracy;  // percent per regime
    friend bool operator==(const SliceAccuracy&, const SliceAccuracy&) = default;
};

struct LocalizationReport {
    std::vector<double> per_regime_accuracy;  // percent, aggregated per query
    std::map<std::string, SliceAccuracy> per_slice;
    int64_t n_queries = 0;
    int64_t skipped = 0;  // queries without ground-truth pose
    std::string metric;
    std::string pca;
    std::vector<RetrievalLogRow> log;

    friend bool operator==(const LocalizationReport&, const LocalizationReport&) = default;
};

// Pure function of (log, manifest slices, regimes).
LocalizationReport report_from_log(const std::vector<RetrievalLogRow>& log, const DatasetManifest& manifest,
                                   const PrecisionRegimes& regimes, int64_t skipped = 0);

// Top-1 retrieval for every query: the query inherits the retrieved
// reference's pose and is scored against its own ground truth.
LocalizationReport evaluate(const FeatureIndex& index, const GeneratorBank& bank, const DatasetManifest& manifest,
                            const PrecisionRegimes& regimes, ImageStore* store = nullptr);

// "20.2/45.0/87.2"
std::string format_accuracies(const std::vector<double>& accuracy);
std::string format_report_table(const LocalizationReport& report, const PrecisionRegimes& regimes);
void write_report_csv(const LocalizationReport& report, const std::filesystem::path& path);

void write_retrieval_log(const std::vector<RetrievalLogRow>& log, const std::filesystem::path& path);
std::vector<RetrievalLogRow> read_retrieval_log(const std::filesystem::path& path);

}  // namespace difl
