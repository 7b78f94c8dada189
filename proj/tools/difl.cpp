#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difl/checksum.hpp"
#include "difl/data.hpp"
#include "difl/errors.hpp"
#include "difl/evaluator.hpp"
#include "difl/feature_index.hpp"
#include "difl/kv.hpp"
#include "difl/model_bank.hpp"
#include "difl/trainer.hpp"

namespace fs = std::filesystem;
using namespace difl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

PrecisionRegimes parse_regimes(const std::string& text) {
    PrecisionRegimes r;
    if (text.empty()) return r;
    r.thresholds.clear();
    std::stringstream s(text);
    std::string item;
    while (std::getline(s, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("regime '" + item + "' must be <meters>:<degrees>");
        try {
            r.thresholds.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
        } catch (const std::logic_error&) {
            throw ConfigError("regime '" + item + "' is not numeric");
        }
    }
    r.validate();
    return r;
}

std::string real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    ToySceneSpec spec;
    std::string out = "toy";
};

int cmd_synth(const SynthArgs& a) {
    const auto m = generate_toy_dataset(a.spec, a.out);
    const auto text = [&] {
        std::ifstream in(fs::path(a.out) / "manifest.csv", std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    }();
    std::printf("wrote %zu images to %s (manifest crc32 %08x)\n", m.records.size(), a.out.c_str(), crc32(text));
    return kExitOk;
}

struct TrainArgs {
    std::string config;
    std::string resume;
    bool no_fcl = false;
    std::vector<std::string> sets;
    std::string manifest, out;
    int64_t epochs_constant = -1, epochs_decay = -1, fcl_start = -1;
    int64_t seed = -1;
    bool quiet = false;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
    KeyValues kv;
    if (!a.config.empty()) kv = read_key_values_file(a.config);
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        auto key = s.substr(0, eq), value = s.substr(eq + 1);
        kv[key] = value;
    }
    if (!a.manifest.empty()) kv["manifest"] = a.manifest;
    if (!a.out.empty()) kv["output_dir"] = a.out;
    if (a.epochs_constant >= 0) kv["epochs_constant"] = std::to_string(a.epochs_constant);
    if (a.epochs_decay >= 0) kv["epochs_decay"] = std::to_string(a.epochs_decay);
    if (a.seed >= 0) kv["seed"] = std::to_string(a.seed);
    if (a.fcl_start >= 0) kv["fcl_start_epoch"] = std::to_string(a.fcl_start);
    if (a.no_fcl) {
        kv["fcl_start_epoch"] = "none";
        kv["lambda2"] = "0";
    }
    auto cfg = TrainConfig::from_key_values(kv);
    cfg.validate();
    if (cfg.manifest.empty()) throw ConfigError("no manifest given (config key 'manifest' or --manifest)");
    return cfg;
}

int cmd_train(const TrainArgs& a) {
    const auto cfg = resolve_train_config(a);
    auto manifest = load_manifest(cfg.manifest);
    FitOptions opts;
    opts.verbose = !a.quiet;
    if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
    fs::create_directories(cfg.output_dir);
    {
        std::ofstream out(fs::path(cfg.output_dir) / "config.txt");
        out << format_key_values(cfg.to_key_values());
    }
    const auto result = fit(manifest, cfg, opts);
    std::printf("config hash %08x\n", cfg.hash());
    for (const auto& p : result.checkpoints) std::printf("checkpoint %s\n", p.string().c_str());
    return kExitOk;
}

struct IndexArgs {
    std::string checkpoint, manifest, out = "index.difx";
    std::string metric = "cosine", pca = "none";
    bool whiten = false;
};

int cmd_index(const IndexArgs& a) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto manifest = load_manifest(a.manifest);
    const auto index =
        build_index(ckpt.banks.generators, manifest, parse_metric(a.metric), PcaSpec::parse(a.pca), nullptr, a.whiten);
    save_index(index, a.out);
    std::printf("indexed %zu references in %zu slices -> %s\n", index.size(), index.slices.size(), a.out.c_str());
    return kExitOk;
}

struct RetrieveArgs {
    std::string index, checkpoint, manifest;
    std::vector<std::string> queries;
    int64_t top_k = 5;
};

int cmd_retrieve(const RetrieveArgs& a) {
    const auto index = load_index(a.index);
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto manifest = load_manifest(a.manifest);
    const auto& bank = ckpt.banks.generators;
    ImageStore store(manifest, bank.config().input_height, bank.config().input_width);
    std::vector<const ImageRecord*> queries;
    if (a.queries.empty()) {
        queries = manifest.with_role(Role::Query);
    } else {
        for (const auto& id : a.queries) queries.push_back(&manifest.find(id));
    }
    std::printf("query_id,rank,image_id,distance\n");
    for (const auto* q : queries) {
        const auto matches = retrieve(index, bank, *q, a.top_k, store);
        for (size_t i = 0; i < matches.size(); ++i)
            std::printf("%s,%zu,%s,%s\n", q->id.c_str(), i + 1, matches[i].image_id.c_str(),
                        real(matches[i].distance).c_str());
    }
    return kExitOk;
}

struct EvalArgs {
    std::vector<std::string> checkpoints;
    std::string manifest, index, metric = "cosine", pca = "none";
    std::string regimes, log, report, history, from_log;
};

int cmd_eval(const EvalArgs& a) {
    const auto regimes = parse_regimes(a.regimes);
    const auto manifest = load_manifest(a.manifest);
    if (!a.from_log.empty()) {
        auto report = report_from_log(read_retrieval_log(a.from_log), manifest, regimes);
        report.metric = a.metric;
        report.pca = a.pca;
        std::cout << format_report_table(report, regimes);
        if (!a.report.empty()) write_report_csv(report, a.report);
        return kExitOk;
    }
    if (a.checkpoints.empty()) throw ConfigError("eval needs --checkpoint or --from-log");
    if (!a.index.empty() && a.checkpoints.size() != 1)
        throw ConfigError("--index can only be combined with a single --checkpoint");

    std::ofstream history;
    if (!a.history.empty()) {
        history.open(a.history);
        if (!history) throw IoError("cannot write history " + a.history);
        history << "epoch";
        for (size_t i = 0; i < regimes.thresholds.size(); ++i) history << ",regime" << i;
        history << "\n";
    }
    for (const auto& path : a.checkpoints) {
        const auto ckpt = load_checkpoint(path);
        const auto& bank = ckpt.banks.generators;
        ImageStore store(manifest, bank.config().input_height, bank.config().input_width);
        const auto index = a.index.empty()
                               ? build_index(bank, manifest, parse_metric(a.metric), PcaSpec::parse(a.pca), &store)
                               : load_index(a.index);
        auto report = evaluate(index, bank, manifest, regimes, &store);
        if (a.index.empty()) report.pca = PcaSpec::parse(a.pca).to_string();
        std::cout << "checkpoint " << path << " (epoch " << ckpt.meta.epoch << ")\n"
                  << format_report_table(report, regimes);
        if (history.is_open()) {
            history << ckpt.meta.epoch;
            for (double v : report.per_regime_accuracy) history << ',' << real(v);
            history << "\n";
        }
        if (a.checkpoints.size() == 1) {
            if (!a.log.empty()) write_retrieval_log(report.log, a.log);
            if (!a.report.empty()) write_report_csv(report, a.report);
        }
    }
    return kExitOk;
}

struct AblateArgs {
    std::vector<std::string> models;
    std::string manifest, regimes, out;
    std::vector<std::string> test_metrics{"cosine", "l2"};
    std::vector<std::string> pcas{"none"};
};

int cmd_ablate(const AblateArgs& a) {
    if (a.models.empty() || a.test_metrics.empty() || a.pcas.empty())
        throw ConfigError("ablation grid is empty");
    const auto regimes = parse_regimes(a.regimes);
    const auto manifest = load_manifest(a.manifest);
    std::ofstream csv;
    if (!a.out.empty()) {
        csv.open(a.out);
        if (!csv) throw IoError("cannot write " + a.out);
        csv << "checkpoint,train,lambda2,test,pca";
        for (size_t i = 0; i < regimes.thresholds.size(); ++i) csv << ",regime" << i;
        csv << "\n";
    }
    std::printf("%-8s %-8s %-8s %-6s %s\n", "Train", "lambda2", "Test", "PCA", "accuracy (%)");
    for (const auto& path : a.models) {
        const auto ckpt = load_checkpoint(path);
        // Train column and lambda2 describe the last epoch the checkpoint saw.
        std::string train = "none";
        double lambda2 = 0.0;
        if (!ckpt.meta.train_config.empty()) {
            const auto cfg = TrainConfig::from_key_values(parse_key_values(ckpt.meta.train_config));
            lambda2 = ckpt.meta.epoch > 0 ? lambda2_schedule(ckpt.meta.epoch - 1, cfg) : 0.0;
            if (lambda2 > 0.0) train = cfg.fcl_metric == FeatureMetric::L2 ? "l2" : "cosine";
        }
        const auto& bank = ckpt.banks.generators;
        ImageStore store(manifest, bank.config().input_height, bank.config().input_width);
        for (const auto& metric : a.test_metrics) {
            for (const auto& pca : a.pcas) {
                const auto index = build_index(bank, manifest, parse_metric(metric), PcaSpec::parse(pca), &store);
                const auto report = evaluate(index, bank, manifest, regimes, &store);
                std::printf("%-8s %-8.3g %-8s %-6s %s\n", train.c_str(), lambda2, metric.c_str(), pca.c_str(),
                            format_accuracies(report.per_regime_accuracy).c_str());
                if (csv.is_open()) {
                    csv << path << ',' << train << ',' << real(lambda2) << ',' << metric << ',' << pca;
                    for (double v : report.per_regime_accuracy) csv << ',' << real(v);
                    csv << "\n";
                }
            }
        }
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// plot

struct Series {
    std::string label;
    std::vector<double> epochs;
    std::vector<std::vector<double>> values;  // per regime
};

Series read_history(const std::string& spec) {
    Series s;
    std::string path = spec;
    const auto eq = spec.find('=');
    if (eq != std::string::npos) {
        s.label = spec.substr(0, eq);
        path = spec.substr(eq + 1);
    } else {
        s.label = fs::path(spec).stem().string();
    }
    std::ifstream in(path);
    if (!in) throw IoError("cannot open history " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("epoch", 0) != 0)
        throw FormatError("history " + path + " has no epoch header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        try {
            while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
        } catch (const std::logic_error&) {
            throw FormatError("history " + path + " has a non-numeric cell");
        }
        if (cells.size() < 2) throw FormatError("history " + path + " row has no accuracy column");
        if (s.values.empty()) s.values.resize(cells.size() - 1);
        if (cells.size() - 1 != s.values.size()) throw FormatError("history " + path + " has ragged rows");
        s.epochs.push_back(cells[0]);
        for (size_t i = 1; i < cells.size(); ++i) s.values[i - 1].push_back(cells[i]);
    }
    if (s.epochs.empty()) throw FormatError("history " + path + " is empty");
    return s;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

void marker(std::ostream& svg, int regime, double x, double y, const std::string& color) {
    switch (regime % 3) {
        case 0:
            svg << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
            break;
        case 1:
            svg << "<rect x=\"" << fmt(x - 3.5) << "\" y=\"" << fmt(y - 3.5) << "\" width=\"7\" height=\"7\" fill=\""
                << color << "\"/>\n";
            break;
        default:
            svg << "<polygon points=\"" << fmt(x) << ',' << fmt(y - 4.5) << ' ' << fmt(x + 4.5) << ',' << fmt(y) << ' '
                << fmt(x) << ',' << fmt(y + 4.5) << ' ' << fmt(x - 4.5) << ',' << fmt(y) << "\" fill=\"" << color
                << "\"/>\n";
    }
}

struct PlotArgs {
    std::vector<std::string> histories;
    std::string out = "curves.svg";
    std::string title = "Localization accuracy vs. epoch";
};

int cmd_plot(const PlotArgs& a) {
    if (a.histories.empty()) throw FormatError("no history files given");
    std::vector<Series> series;
    for (const auto& h : a.histories) series.push_back(read_history(h));

    double xmin = series[0].epochs.front(), xmax = xmin;
    for (const auto& s : series)
        for (double e : s.epochs) {
            xmin = std::min(xmin, e);
            xmax = std::max(xmax, e);
        }
    if (xmax == xmin) xmax = xmin + 1;
    const double W = 720, H = 440, L = 60, R = 170, T = 40, B = 50;
    auto px = [&](double e) { return L + (e - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double v) { return T + (100.0 - v) / 100.0 * (H - T - B); };
    const std::vector<std::string> colors{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const std::vector<std::string> regime_names{"HP", "MP", "CP"};
    const std::vector<std::string> dashes{"", "6,3", "2,2"};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << a.title << "</text>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << py(0) << "\" x2=\"" << W - R << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << py(0) << "\" x2=\"" << L << "\" y2=\"" << py(100) << "\" stroke=\"black\"/>\n";
    for (int v = 0; v <= 100; v += 20) {
        svg << "<line x1=\"" << L - 4 << "\" y1=\"" << fmt(py(v)) << "\" x2=\"" << W - R << "\" y2=\"" << fmt(py(v))
            << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << L - 8 << "\" y=\"" << fmt(py(v) + 4) << "\" text-anchor=\"end\">" << v << "</text>\n";
    }
    for (int i = 0; i <= 5; ++i) {
        const double e = xmin + (xmax - xmin) * i / 5.0;
        svg << "<text x=\"" << fmt(px(e)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(e)
            << "</text>\n";
    }
    svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
    svg << "<text x=\"16\" y=\"" << H / 2 << "\" transform=\"rotate(-90 16 " << H / 2
        << ")\" text-anchor=\"middle\">accuracy (%)</text>\n";

    int legend_row = 0;
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const auto& color = colors[si % colors.size()];
        for (size_t r = 0; r < s.values.size(); ++r) {
            svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
            if (!dashes[r % 3].empty()) svg << " stroke-dasharray=\"" << dashes[r % 3] << "\"";
            svg << " points=\"";
            for (size_t i = 0; i < s.epochs.size(); ++i)
                svg << (i ? " " : "") << fmt(px(s.epochs[i])) << ',' << fmt(py(s.values[r][i]));
            svg << "\"/>\n";
            for (size_t i = 0; i < s.epochs.size(); ++i)
                marker(svg, static_cast<int>(r), px(s.epochs[i]), py(s.values[r][i]), color);
            const double ly = T + 10 + 16 * legend_row++;
            marker(svg, static_cast<int>(r), W - R + 16, ly, color);
            const std::string name = r < regime_names.size() ? regime_names[r] : "R" + std::to_string(r);
            svg << "<text x=\"" << W - R + 26 << "\" y=\"" << fmt(ly + 4) << "\">" << s.label << " " << name
                << "</text>\n";
        }
    }
    svg << "</svg>\n";
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write " + a.out);
    out << svg.str();
    std::printf("wrote %s (%zu series)\n", a.out.c_str(), series.size());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Domain-invariant feature learning for cross-season visual localization"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a toy multi-domain dataset with ground-truth poses");
    s->add_option("--places", synth.spec.n_places, "Number of places")->capture_default_str();
    s->add_option("--domains", synth.spec.n_domains, "Number of domains")->capture_default_str();
    s->add_option("--size", synth.spec.image_size, "Image side in pixels")->capture_default_str();
    s->add_option("--slices", synth.spec.n_slices, "Number of slices")->capture_default_str();
    s->add_option("--jitter-m", synth.spec.pose_jitter_m, "Query translation jitter (m)")->capture_default_str();
    s->add_option("--jitter-deg", synth.spec.pose_jitter_deg, "Query rotation jitter (deg)")->capture_default_str();
    s->add_option("--seed", synth.spec.seed, "Random seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->capture_default_str();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train the multi-domain translation model");
    t->add_option("--config", train.config, "Key/value config file");
    t->add_option("--resume", train.resume, "Checkpoint to resume from");
    t->add_flag("--no-fcl", train.no_fcl, "Disable the feature consistency loss (lambda2 = 0)");
    t->add_option("--fcl-start", train.fcl_start, "Epoch at which the feature consistency ramp starts");
    t->add_option("--manifest", train.manifest, "Dataset manifest");
    t->add_option("--out", train.out, "Output directory");
    t->add_option("--epochs-constant", train.epochs_constant, "Epochs at the base learning rate");
    t->add_option("--epochs-decay", train.epochs_decay, "Epochs of linear decay to zero");
    t->add_option("--seed", train.seed, "Random seed");
    t->add_option("--set", train.sets, "Override any config key (key=value), repeatable");
    t->add_flag("--quiet", train.quiet, "No per-epoch progress");

    IndexArgs idx;
    auto* ix = app.add_subcommand("index", "Encode the reference images into a feature index");
    ix->add_option("--checkpoint", idx.checkpoint, "Model checkpoint")->required();
    ix->add_option("--manifest", idx.manifest, "Dataset manifest")->required();
    ix->add_option("--metric", idx.metric, "cosine or l2")->capture_default_str();
    ix->add_option("--pca", idx.pca, "none, slice or a component count")->capture_default_str();
    ix->add_flag("--whiten", idx.whiten, "Whiten PCA components");
    ix->add_option("--out", idx.out, "Index file")->capture_default_str();

    RetrieveArgs ret;
    auto* r = app.add_subcommand("retrieve", "Rank references for query images");
    r->add_option("--index", ret.index, "Index file")->required();
    r->add_option("--checkpoint", ret.checkpoint, "Model checkpoint")->required();
    r->add_option("--manifest", ret.manifest, "Dataset manifest")->required();
    r->add_option("--query", ret.queries, "Query id, repeatable (default: all queries)");
    r->add_option("--top-k", ret.top_k, "Matches per query")->capture_default_str();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Localize queries and report per-regime accuracy");
    e->add_option("--checkpoint", ev.checkpoints, "Checkpoint(s) to evaluate");
    e->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
    e->add_option("--index", ev.index, "Prebuilt index (single checkpoint only)");
    e->add_option("--metric", ev.metric, "cosine or l2")->capture_default_str();
    e->add_option("--pca", ev.pca, "none, slice or a component count")->capture_default_str();
    e->add_option("--regimes", ev.regimes, "Thresholds as m:deg,m:deg,... (default .25:2,.5:5,5:10)");
    e->add_option("--log", ev.log, "Write the retrieval log");
    e->add_option("--report", ev.report, "Write the report as CSV");
    e->add_option("--history", ev.history, "Write epoch,accuracy rows, one per checkpoint");
    e->add_option("--from-log", ev.from_log, "Re-evaluate a retrieval log offline");

    AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "Evaluate a grid of models x test metrics x PCA settings");
    a->add_option("--model", ab.models, "Checkpoint, repeatable")->required();
    a->add_option("--manifest", ab.manifest, "Dataset manifest")->required();
    a->add_option("--test-metric", ab.test_metrics, "Test metrics")->capture_default_str();
    a->add_option("--pca", ab.pcas, "PCA settings")->capture_default_str();
    a->add_option("--regimes", ab.regimes, "Thresholds as m:deg,m:deg,...");
    a->add_option("--out", ab.out, "Write the grid as CSV");

    PlotArgs pl;
    auto* p = app.add_subcommand("plot", "Draw accuracy-vs-epoch curves as SVG");
    p->add_option("histories", pl.histories, "History files, optionally label=path");
    p->add_option("--out", pl.out, "SVG file")->capture_default_str();
    p->add_option("--title", pl.title, "Figure title");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*t) return cmd_train(train);
        if (*ix) return cmd_index(idx);
        if (*r) return cmd_retrieve(ret);
        if (*e) return cmd_eval(ev);
        if (*a) return cmd_ablate(ab);
        if (*p) return cmd_plot(pl);
    } catch (const ConfigError& err) {
        std::cerr << "ConfigError: " << err.what() << "\n";
        return kExitUsage;
    } catch (const TrainingDiverged& err) {
        std::cerr << "TrainingDiverged: " << err.what() << "\n";
        return kExitDiverged;
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitData;
    } catch (const c10::Error& err) {
        std::cerr << "error: " << err.what_without_backtrace() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
