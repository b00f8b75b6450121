// msclr command line: synthetic data generation, momentum-contrast
// pretraining, linear evaluation with stream fusion and format ensembling,
// dataset validation, and report/plot emission.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "msclr/conventions.hpp"
#include "msclr/dataio.hpp"
#include "msclr/errors.hpp"
#include "msclr/evalkit.hpp"
#include "msclr/pretrain.hpp"
#include "msclr/runconfig.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct CommonOpts {
    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;  // key=value
};

msclr::RunConfig build_config(const CommonOpts& opts) {
    msclr::RunConfig cfg;
    if (!opts.config_path.empty())
        cfg = msclr::load_run_config(opts.config_path);
    else if (!opts.preset.empty())
        cfg = msclr::RunConfig::make_preset(opts.preset);
    if (!opts.preset.empty() && !opts.config_path.empty())
        throw msclr::config_error("--preset and --config are mutually exclusive");
    for (const auto& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw msclr::config_error("--set expects key=value, got: " + kv);
        msclr::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

std::vector<const msclr::SequenceRecord*> split_view(const std::vector<msclr::SequenceRecord>& all,
                                                     const std::string& split) {
    std::vector<const msclr::SequenceRecord*> out;
    for (const auto& r : all)
        if (split.empty() || r.split == split) out.push_back(&r);
    return out;
}

int count_classes(const std::vector<msclr::SequenceRecord>& records) {
    int k = 0;
    for (const auto& r : records) k = std::max(k, r.label + 1);
    return k;
}

int cmd_make_synthetic(const std::string& out_dir, int classes, int per_class,
                       std::uint64_t seed, double train_fraction, int frames, int person_slots,
                       int active_persons) {
    msclr::SyntheticConfig scfg;
    scfg.train_fraction = train_fraction;
    scfg.frames_base = frames;
    scfg.person_slots = person_slots;
    scfg.active_persons = active_persons;
    const auto registry = msclr::builtin_registry();
    const auto records =
        msclr::generate_synthetic_dataset(classes, per_class, registry, seed, scfg);
    const auto manifest = msclr::write_dataset(records, out_dir);
    std::cout << manifest.string() << "\n";
    return kExitOk;
}

int cmd_pretrain(const CommonOpts& common, const std::string& dataset_flag,
                 const std::string& formats_flag, const std::string& out_flag, bool dry_run) {
    msclr::RunConfig cfg = build_config(common);
    if (!dataset_flag.empty()) msclr::apply_override(cfg, "data.dataset", dataset_flag);
    if (!formats_flag.empty()) msclr::apply_override(cfg, "data.formats", formats_flag);
    if (!out_flag.empty()) msclr::apply_override(cfg, "output.dir", out_flag);

    if (dry_run) {
        std::cout << cfg.schedule_json();
        return kExitOk;
    }

    const auto registry = msclr::builtin_registry();
    cfg.validate(registry);
    const auto manifest = msclr::resolve_dataset_path(cfg.dataset);
    const auto records = msclr::read_dataset(manifest, registry);
    auto train = split_view(records, "train");
    if (train.empty()) throw msclr::config_error("dataset has no train split");
    std::vector<msclr::SequenceRecord> train_records;
    train_records.reserve(train.size());
    for (const auto* r : train) train_records.push_back(*r);

    fs::create_directories(cfg.output_dir);
    const fs::path ckpt_path = fs::path(cfg.output_dir) / "checkpoint.msck";
    const fs::path log_path = fs::path(cfg.output_dir) / "train_log.jsonl";
    {
        std::ofstream sched(fs::path(cfg.output_dir) / "schedule.json");
        sched << cfg.schedule_json();
    }

    const auto result =
        msclr::pretrain_run(train_records, registry, cfg.pretrain_options(), ckpt_path, log_path);
    std::cout << result.checkpoint_path.string() << "\n";
    return kExitOk;
}

int cmd_eval(const CommonOpts& common, const std::string& checkpoint_path,
             const std::string& dataset_flag, const std::string& formats_flag,
             const std::string& streams_flag, const std::string& split, bool no_ensemble,
             const std::string& order_flag, const std::string& report_flag,
             const std::string& plot_baseline, const std::string& svg_flag,
             const std::string& cell_flag) {
    msclr::RunConfig cfg = build_config(common);
    if (!dataset_flag.empty()) msclr::apply_override(cfg, "data.dataset", dataset_flag);
    if (!order_flag.empty()) msclr::apply_override(cfg, "eval.ensemble_order", order_flag);

    auto ckpt = msclr::load_checkpoint(checkpoint_path);
    const auto registry = ckpt.registry();

    std::vector<std::string> formats = ckpt.formats;
    if (!formats_flag.empty()) {
        formats.clear();
        std::string cur;
        for (char c : formats_flag + ",") {
            if (c == ',' || c == ' ') {
                if (!cur.empty()) formats.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
    }
    for (const auto& f : formats)
        if (std::find(ckpt.formats.begin(), ckpt.formats.end(), f) == ckpt.formats.end())
            throw msclr::config_error("checkpoint was not pretrained with format " + f);

    std::vector<msclr::Stream> streams;
    {
        std::string list = streams_flag.empty() ? "joint,motion,bone" : streams_flag;
        std::string cur;
        for (char c : list + ",") {
            if (c == ',' || c == ' ') {
                if (!cur.empty()) streams.push_back(msclr::stream_from_string(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
    }

    const auto manifest = msclr::resolve_dataset_path(cfg.dataset);
    const auto records = msclr::read_dataset(manifest, registry);
    const auto train = split_view(records, "train");
    const auto eval_set = split_view(records, split);
    if (train.empty()) throw msclr::config_error("dataset has no train split");
    if (eval_set.empty()) throw msclr::config_error("dataset has no '" + split + "' split");
    const int n_classes = count_classes(records);
    if (n_classes < 2) throw msclr::config_error("dataset has fewer than 2 classes");

    std::map<std::string, msclr::AdjacencySet> adjacency;
    for (const auto& f : formats)
        adjacency.emplace(f, msclr::build_adjacency_set(registry.get(f), ckpt.padded_joints));

    msclr::HeadGrid heads;
    const auto schedule = cfg.eval_schedule();
    for (const auto& f : formats)
        for (auto s : streams) {
            std::cerr << "training linear head " << msclr::head_key(f, s) << "\n";
            heads.emplace(msclr::head_key(f, s),
                          msclr::train_linear(*ckpt.query, adjacency.at(f), train, f, s,
                                              ckpt.frames, n_classes, schedule, registry));
        }

    msclr::EvalProtocol protocol;
    protocol.formats = formats;
    protocol.streams = streams;
    protocol.fusion_weights.assign(cfg.fusion_weights.begin(), cfg.fusion_weights.end());
    protocol.fusion_weights.resize(streams.size(),
                                   protocol.fusion_weights.empty() ? 1.0
                                                                   : protocol.fusion_weights.back());
    protocol.ensemble = !no_ensemble;
    protocol.order = msclr::ensemble_order_from_string(cfg.ensemble_order);
    protocol.split = split;
    protocol.frames = ckpt.frames;
    protocol.n_classes = n_classes;
    protocol.checkpoint_id = fs::path(checkpoint_path).filename().string();

    const auto report =
        msclr::evaluate(*ckpt.query, adjacency, heads, eval_set, registry, protocol);

    const fs::path report_path =
        report_flag.empty() ? fs::path(cfg.output_dir) / "report.json" : fs::path(report_flag);
    fs::create_directories(report_path.parent_path().empty() ? "." : report_path.parent_path());
    report.save(report_path);

    for (const auto& e : report.entries)
        std::cout << e.format << "/" << e.stream << " top1 " << e.top1 << "\n";
    std::cout << report_path.string() << "\n";

    if (!plot_baseline.empty()) {
        const auto baseline = msclr::EvalReport::load(plot_baseline);
        std::string cf = "ensemble", cs = "fused";
        if (!cell_flag.empty()) {
            const auto slash = cell_flag.find('/');
            if (slash == std::string::npos)
                throw msclr::config_error("--cell expects format/stream");
            cf = cell_flag.substr(0, slash);
            cs = cell_flag.substr(slash + 1);
        } else if (!report.has(cf, cs)) {
            cf = report.entries.front().format;
            cs = report.entries.front().stream;
        }
        const auto diffs = msclr::per_class_diff(report.find(cf, cs), baseline.find(cf, cs));
        const fs::path svg_path = svg_flag.empty()
                                      ? fs::path(cfg.output_dir) / "per_class_diff.svg"
                                      : fs::path(svg_flag);
        std::ofstream svg(svg_path);
        if (!svg) throw msclr::io_error("cannot write svg: " + svg_path.string());
        svg << msclr::svg_bar_chart(diffs, "per-class top-1 diff (" + cf + "/" + cs + ")");
        std::cout << svg_path.string() << "\n";
    }
    return kExitOk;
}

int cmd_validate(const CommonOpts& common, const std::string& dataset_flag,
                 const std::string& formats_flag) {
    msclr::RunConfig cfg = build_config(common);
    if (!dataset_flag.empty()) msclr::apply_override(cfg, "data.dataset", dataset_flag);
    if (!formats_flag.empty()) msclr::apply_override(cfg, "data.formats", formats_flag);

    const auto registry = msclr::builtin_registry();
    std::vector<std::string> findings;
    try {
        cfg.validate(registry);
    } catch (const msclr::error& e) {
        findings.push_back(std::string("config: ") + e.what());
    }

    fs::path manifest_path;
    try {
        manifest_path = msclr::resolve_dataset_path(cfg.dataset);
    } catch (const msclr::error& e) {
        findings.push_back(std::string("config: ") + e.what());
    }

    if (!manifest_path.empty()) {
        std::ifstream is(manifest_path);
        if (!is) {
            findings.push_back("dataset: cannot open manifest " + manifest_path.string());
        } else {
            json manifest;
            try {
                is >> manifest;
                for (const auto& entry : manifest.at("records")) {
                    const auto sample_id = entry.at("sample_id").get<std::string>();
                    for (const auto& fmt : cfg.formats)
                        if (!entry.at("formats").contains(fmt))
                            findings.push_back("record " + sample_id + ": missing format " + fmt);
                    for (const auto& [conv_name, rel] : entry.at("formats").items()) {
                        const auto path = manifest_path.parent_path() / rel.get<std::string>();
                        try {
                            if (!registry.contains(conv_name))
                                throw msclr::io_error("unknown convention " + conv_name);
                            std::string file_conv;
                            const auto raw = msclr::read_sequence_file(path, file_conv);
                            if (file_conv != conv_name)
                                throw msclr::io_error("file declares convention " + file_conv);
                            if (raw.dim(1) != registry.get(conv_name).joint_count)
                                throw msclr::io_error("joint dimension mismatch");
                        } catch (const msclr::error& e) {
                            findings.push_back("record " + sample_id + " [" + conv_name +
                                               "]: " + e.what());
                        }
                    }
                }
            } catch (const json::exception& e) {
                findings.push_back("dataset: malformed manifest: " + std::string(e.what()));
            }
        }
    }

    for (const auto& f : findings) std::cout << "FINDING " << f << "\n";
    std::cout << (findings.empty() ? "clean" : std::to_string(findings.size()) + " finding(s)")
              << "\n";
    return findings.empty() ? kExitOk : kExitConfig;
}

int cmd_report(const CommonOpts& common, bool schedule, const std::string& diff_path,
               const std::string& baseline_path, const std::string& svg_path,
               const std::string& cell_flag) {
    if (schedule) {
        const msclr::RunConfig cfg = build_config(common);
        std::cout << cfg.schedule_json();
        return kExitOk;
    }
    if (diff_path.empty() || baseline_path.empty())
        throw msclr::config_error("report needs --schedule or --diff plus --baseline");
    const auto a = msclr::EvalReport::load(diff_path);
    const auto b = msclr::EvalReport::load(baseline_path);
    std::string cf = "ensemble", cs = "fused";
    if (!cell_flag.empty()) {
        const auto slash = cell_flag.find('/');
        if (slash == std::string::npos) throw msclr::config_error("--cell expects format/stream");
        cf = cell_flag.substr(0, slash);
        cs = cell_flag.substr(slash + 1);
    } else if (!a.has(cf, cs)) {
        cf = a.entries.front().format;
        cs = a.entries.front().stream;
    }
    const auto diffs = msclr::per_class_diff(a.find(cf, cs), b.find(cf, cs));
    for (const auto& [cls, d] : diffs) std::cout << "class " << cls << " diff " << d << "\n";
    if (!svg_path.empty()) {
        std::ofstream svg(svg_path);
        if (!svg) throw msclr::io_error("cannot write svg: " + svg_path);
        svg << msclr::svg_bar_chart(diffs, "per-class top-1 diff (" + cf + "/" + cs + ")");
        std::cout << svg_path << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-skeleton contrastive learning toolkit"};
    app.require_subcommand(1);

    // make-synthetic
    auto* mk = app.add_subcommand("make-synthetic", "generate a synthetic multi-format dataset");
    std::string mk_out = "runs/synthetic";
    int mk_classes = 3, mk_per_class = 30, mk_frames = 60, mk_slots = 2, mk_active = 1;
    std::uint64_t mk_seed = 7;
    double mk_train_fraction = 2.0 / 3.0;
    mk->add_option("--out", mk_out, "output dataset directory");
    mk->add_option("--classes", mk_classes, "number of motion classes (>= 2)");
    mk->add_option("--per-class", mk_per_class, "records per class");
    mk->add_option("--seed", mk_seed, "generator seed");
    mk->add_option("--train-fraction", mk_train_fraction, "fraction tagged train");
    mk->add_option("--frames", mk_frames, "base raw frame count");
    mk->add_option("--person-slots", mk_slots, "person slots per record (absent ones zero-filled)");
    mk->add_option("--active-persons", mk_active, "rendered bodies per record");

    // shared config options
    auto add_common = [](CLI::App* cmd, CommonOpts& c) {
        cmd->add_option("--config", c.config_path, "run configuration file");
        cmd->add_option("--preset", c.preset, "configuration preset: desk | paper");
        cmd->add_option("--set", c.overrides, "override config key, e.g. --set pretrain.epochs=5");
    };

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "momentum-contrast pretraining");
    CommonOpts pt_common;
    add_common(pt, pt_common);
    std::string pt_dataset, pt_formats, pt_out;
    bool pt_dry = false;
    pt->add_option("--dataset", pt_dataset, "dataset directory or manifest");
    pt->add_option("--formats", pt_formats, "comma-separated convention names");
    pt->add_option("--out", pt_out, "output directory");
    pt->add_flag("--dry-run", pt_dry, "print the resolved schedule and exit");

    // eval
    auto* ev = app.add_subcommand("eval", "linear evaluation of a checkpoint");
    CommonOpts ev_common;
    add_common(ev, ev_common);
    std::string ev_ckpt, ev_dataset, ev_formats, ev_streams, ev_split = "test";
    std::string ev_order, ev_report, ev_plot, ev_svg, ev_cell;
    bool ev_no_ensemble = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint archive")->required();
    ev->add_option("--dataset", ev_dataset, "dataset directory or manifest");
    ev->add_option("--formats", ev_formats, "formats to evaluate (default: checkpoint formats)");
    ev->add_option("--streams", ev_streams, "streams to evaluate (default: joint,motion,bone)");
    ev->add_option("--split", ev_split, "dataset split to score");
    ev->add_flag("--no-ensemble", ev_no_ensemble, "skip format-ensembled rows");
    ev->add_option("--order", ev_order, "formats_then_streams | streams_then_formats");
    ev->add_option("--report", ev_report, "report output path");
    ev->add_option("--plot", ev_plot, "baseline report for a per-class diff chart");
    ev->add_option("--svg", ev_svg, "per-class diff SVG output path");
    ev->add_option("--cell", ev_cell, "report cell for the diff, format/stream");

    // validate
    auto* va = app.add_subcommand("validate", "config and dataset consistency check");
    CommonOpts va_common;
    add_common(va, va_common);
    std::string va_dataset, va_formats;
    va->add_option("--dataset", va_dataset, "dataset directory or manifest");
    va->add_option("--formats", va_formats, "formats every record must provide");

    // report
    auto* rp = app.add_subcommand("report", "schedule dump and per-class diff tooling");
    CommonOpts rp_common;
    add_common(rp, rp_common);
    bool rp_schedule = false;
    std::string rp_diff, rp_baseline, rp_svg, rp_cell;
    rp->add_flag("--schedule", rp_schedule, "print the protocol schedule as JSON");
    rp->add_option("--diff", rp_diff, "report to compare");
    rp->add_option("--baseline", rp_baseline, "baseline report");
    rp->add_option("--svg", rp_svg, "SVG output path");
    rp->add_option("--cell", rp_cell, "report cell, format/stream");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (mk->parsed())
            return cmd_make_synthetic(mk_out, mk_classes, mk_per_class, mk_seed,
                                      mk_train_fraction, mk_frames, mk_slots, mk_active);
        if (pt->parsed()) return cmd_pretrain(pt_common, pt_dataset, pt_formats, pt_out, pt_dry);
        if (ev->parsed())
            return cmd_eval(ev_common, ev_ckpt, ev_dataset, ev_formats, ev_streams, ev_split,
                            ev_no_ensemble, ev_order, ev_report, ev_plot, ev_svg, ev_cell);
        if (va->parsed()) return cmd_validate(va_common, va_dataset, va_formats);
        if (rp->parsed())
            return cmd_report(rp_common, rp_schedule, rp_diff, rp_baseline, rp_svg, rp_cell);
    } catch (const msclr::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const msclr::numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const msclr::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
