#include "difl/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "difl/errors.hpp"

namespace difl {

void PrecisionRegimes::validate() const {
    if (thresholds.empty()) throw ConfigError("at least one precision regime is required");
    for (size_t i = 0; i < thresholds.size(); ++i) {
        const auto& t = thresholds[i];
        if (t.max_position_m < 0 || t.max_rotation_deg < 0) throw ConfigError("thresholds must be non-negative");
        if (i > 0) {
            const auto& p = thresholds[i - 1];
            if (t.max_position_m < p.max_position_m || t.max_rotation_deg < p.max_rotation_deg ||
                (t.max_position_m == p.max_position_m && t.max_rotation_deg == p.max_rotation_deg))
                throw ConfigError("precision regimes must be strictly nested");
        }
    }
}

double position_error(const Pose& query, const Pose& reference) {
    const double dx = query.position[0] - reference.position[0];
    const double dy = query.position[1] - reference.position[1];
    const double dz = query.position[2] - reference.position[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double rotation_error(const Quaternion& query, const Quaternion& reference) {
    if (query.norm() == 0.0 || reference.norm() == 0.0) throw DegenerateRotation("zero quaternion");
    // Relative rotation r = q_ref^-1 * q_query; its angle is 2*atan2(|r.xyz|, |r.w|),
    // which equals 2*acos(|<q_query, q_ref>|) but stays accurate near zero.
    const auto r = reference.normalized().conjugate() * query.normalized();
    const double v = std::sqrt(r.x * r.x + r.y * r.y + r.z * r.z);
    return 2.0 * std::atan2(v, std::abs(r.w)) * 180.0 / std::numbers::pi;
}

std::vector<bool> classify(double e_pos, double e_rot, const PrecisionRegimes& regimes) {
    std::vector<bool> flags;
    flags.reserve(regimes.thresholds.size());
    for (const auto& t : regimes.thresholds)
        flags.push_back(e_pos <= t.max_position_m && e_rot <= t.max_rotation_deg);
    return flags;
}

LocalizationReport report_from_log(const std::vector<RetrievalLogRow>& log, const DatasetManifest& manifest,
                                   const PrecisionRegimes& regimes, int64_t skipped) {
    regimes.validate();
    const size_t nr = regimes.thresholds.size();
    LocalizationReport report;
    report.log = log;
    report.skipped = skipped;
    report.n_queries = static_cast<int64_t>(log.size());
    std::vector<int64_t> hits(nr, 0);
    std::map<std::string, std::vector<int64_t>> slice_hits;
    std::map<std::string, int64_t> slice_counts;
    for (const auto& row : log) {
        const auto& slice = manifest.find(row.query_id).slice;
        auto& sh = slice_hits[slice];
        sh.resize(nr, 0);
        ++slice_counts[slice];
        const auto flags = classify(row.e_pos, row.e_rot, regimes);
        for (size_t i = 0; i < nr; ++i)
            if (flags[i]) {
                ++hits[i];
                ++sh[i];
            }
    }
    auto percent = [](int64_t h, int64_t n) { return n == 0 ? 0.0 : 100.0 * static_cast<double>(h) / n; };
    for (size_t i = 0; i < nr; ++i) report.per_regime_accuracy.push_back(percent(hits[i], report.n_queries));
    for (const auto& [slice, sh] : slice_hits) {
        SliceAccuracy sa;
        sa.n_queries = slice_counts[slice];
        for (size_t i = 0; i < nr; ++i) sa.accuracy.push_back(percent(sh[i], sa.n_queries));
        report.per_slice.emplace(slice, std::move(sa));
    }
    return report;
}

LocalizationReport evaluate(const FeatureIndex& index, const GeneratorBank& bank, const DatasetManifest& manifest,
                            const PrecisionRegimes& regimes, ImageStore* store) {
    std::optional<ImageStore> local;
    if (!store) {
        local.emplace(manifest, bank.config().input_height, bank.config().input_width);
        store = &*local;
    }
    std::vector<RetrievalLogRow> log;
    int64_t skipped = 0;
    for (const auto* q : manifest.with_role(Role::Query)) {
        if (!q->pose) {
            ++skipped;
            continue;
        }
        const auto matches = retrieve(index, bank, *q, 1, *store);
        if (matches.empty()) throw IndexError("slice '" + q->slice + "' returned no match");
        const auto& ref = manifest.find(matches.front().image_id);
        log.push_back({q->id, ref.id, matches.front().distance, position_error(*q->pose, *ref.pose),
                       rotation_error(q->pose->orientation, ref.pose->orientation)});
    }
    auto report = report_from_log(log, manifest, regimes, skipped);
    report.metric = to_string(index.metric);
    if (index.pca.empty()) {
        report.pca = "none";
    } else {
        std::set<int64_t> ks;
        for (const auto& [_, m] : index.pca) ks.insert(m.k);
        report.pca = ks.size() == 1 ? std::to_string(*ks.begin()) : "per-slice";
    }
    return report;
}

std::string format_accuracies(const std::vector<double>& accuracy) {
    std::string out;
    char buf[32];
    for (size_t i = 0; i < accuracy.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.1f", accuracy[i]);
        out += (i ? "/" : "") + std::string(buf);
    }
    return out;
}

std::string format_report_table(const LocalizationReport& report, const PrecisionRegimes& regimes) {
    std::ostringstream out;
    std::string head, sub;
    char buf[64];
    for (size_t i = 0; i < regimes.thresholds.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%g", regimes.thresholds[i].max_position_m);
        head += (i ? "/" : "") + std::string(buf);
        std::snprintf(buf, sizeof buf, "%g", regimes.thresholds[i].max_rotation_deg);
        sub += (i ? "/" : "") + std::string(buf);
    }
    out << "metric=" << report.metric << " pca=" << report.pca << " queries=" << report.n_queries
        << " skipped=" << report.skipped << "\n";
    std::snprintf(buf, sizeof buf, "%-16s %s m\n", "slice", head.c_str());
    out << buf;
    std::snprintf(buf, sizeof buf, "%-16s %s deg\n", "", sub.c_str());
    out << buf;
    for (const auto& [slice, sa] : report.per_slice) {
        std::snprintf(buf, sizeof buf, "%-16s ", slice.c_str());
        out << buf << format_accuracies(sa.accuracy) << "  (" << sa.n_queries << ")\n";
    }
    std::snprintf(buf, sizeof buf, "%-16s ", "all");
    out << buf << format_accuracies(report.per_regime_accuracy) << "\n";
    return out.str();
}

namespace {

std::string real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_report_csv(const LocalizationReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path.string());
    out << "scope,n_queries";
    for (size_t i = 0; i < report.per_regime_accuracy.size(); ++i) out << ",regime" << i;
    out << ",metric,pca\n";
    auto row = [&](const std::string& scope, int64_t n, const std::vector<double>& acc) {
        out << scope << ',' << n;
        for (double a : acc) out << ',' << real(a);
        out << ',' << report.metric << ',' << report.pca << '\n';
    };
    for (const auto& [slice, sa] : report.per_slice) row(slice, sa.n_queries, sa.accuracy);
    row("all", report.n_queries, report.per_regime_accuracy);
}

void write_retrieval_log(const std::vector<RetrievalLogRow>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write retrieval log " + path.string());
    out << "query_id,retrieved_id,distance,e_pos,e_rot\n";
    for (const auto& r : log)
        out << r.query_id << ',' << r.retrieved_id << ',' << real(r.distance) << ',' << real(r.e_pos) << ','
            << real(r.e_rot) << '\n';
}

std::vector<RetrievalLogRow> read_retrieval_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open retrieval log " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "query_id,retrieved_id,distance,e_pos,e_rot")
        throw FormatError("retrieval log " + path.string() + " has an unexpected header");
    std::vector<RetrievalLogRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream s(line);
        std::string cell;
        while (std::getline(s, cell, ',')) cells.push_back(cell);
        if (cells.size() != 5) throw FormatError("retrieval log line " + std::to_string(line_no) + " malformed");
        try {
            rows.push_back({cells[0], cells[1], std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])});
        } catch (const std::exception&) {
            throw FormatError("retrieval log line " + std::to_string(line_no) + " has a bad number");
        }
    }
    return rows;
}

}  // namespace difl
