#pragma once

// Command-line front end: synth | preprocess | train | select-transfer |
// predict | evaluate. Every option may also come from `--config <file>` with
// `key = value` lines (key = long flag name without dashes); flags given on
// the command line win.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "drvessel/drunet.hpp"
#include "drvessel/eval.hpp"
#include "drvessel/imgio.hpp"
#include "drvessel/patchwork.hpp"
#include "drvessel/preprocess.hpp"
#include "drvessel/transfer.hpp"

namespace drvessel::cli {

namespace fs = std::filesystem;

struct Options {
    std::string config;

    // synth
    std::string out;
    std::string dataset = "synth";
    std::string domain = "target";
    std::string style = "retina";
    std::string label;
    std::string id_prefix;
    int count = 1;
    int width = 64;
    int height = 64;
    std::uint64_t seed = 0;
    bool no_masks = false;

    // preprocess
    std::string in;
    std::string data;
    std::vector<std::string> datasets;
    double gamma = 1.2;
    double clip_limit = 2.0;
    std::string tiles = "8x8";

    // network and training
    int patch_size = 48;
    int stride = 24;
    int depth = 2;
    int base_channels = 16;
    int latent_dim = 64;
    std::vector<std::string> target;
    std::vector<std::string> source;
    int epochs = 20;
    int batch = 8;
    int patches_per_image = 16;
    double lr = 1e-3;
    int rounds = 1;
    int threads = 1;
    int k = 4;
    int max_iter = 100;
    double tol = 1e-6;
    double threshold = 0.5;
    std::string report_dir;

    // select-transfer / predict / evaluate
    std::string model;
    std::optional<double> ib_lambda;
    int bins = 8;
    std::optional<int> req_depth, req_base, req_latent, req_patch;
    std::string pred;
    std::string truth;
    std::string roi;
    std::string pred_dir;
    std::string roi_dir;
};

namespace detail {

inline void add_preprocess_flags(CLI::App* s, Options& o)
{
    s->add_option("--gamma", o.gamma, "Gamma exponent applied after CLAHE")->capture_default_str();
    s->add_option("--clip-limit", o.clip_limit, "CLAHE clip limit (multiple of uniform bin height)")->capture_default_str();
    s->add_option("--tiles", o.tiles, "CLAHE tile grid as <n>x<m>")->capture_default_str();
}

inline void add_network_flags(CLI::App* s, Options& o)
{
    s->add_option("--patch-size", o.patch_size, "Square patch side")->capture_default_str();
    s->add_option("--depth", o.depth, "Pooling stages")->capture_default_str();
    s->add_option("--base-channels", o.base_channels, "Channels of the first stage")->capture_default_str();
    s->add_option("--latent-dim", o.latent_dim, "Width of the dimensionality-reduced layer")->capture_default_str();
}

inline void add_selection_flags(CLI::App* s, Options& o)
{
    s->add_option("--k", o.k, "K-Means clusters")->capture_default_str();
    s->add_option("--threshold", o.threshold, "Vote fraction needed to accept a source")->capture_default_str();
    s->add_option("--max-iter", o.max_iter, "K-Means iteration cap")->capture_default_str();
    s->add_option("--tol", o.tol, "K-Means centroid-shift tolerance")->capture_default_str();
}

inline void build_app(CLI::App& app, Options& o)
{
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    auto* synth = app.add_subcommand("synth", "Write synthetic vessel images, masks and manifest entries");
    synth->add_option("--out", o.out, "Dataset root directory")->required();
    synth->add_option("--dataset", o.dataset, "Dataset name")->capture_default_str();
    synth->add_option("--domain", o.domain, "target or source")->check(CLI::IsMember({"target", "source"}))->capture_default_str();
    synth->add_option("--style", o.style, "retina or neuron")->check(CLI::IsMember({"retina", "neuron"}))->capture_default_str();
    synth->add_option("--label", o.label, "Picture-level label for the seed set")->check(CLI::IsMember({"similar", "dissimilar"}));
    synth->add_option("--count", o.count, "Number of images")->capture_default_str();
    synth->add_option("--width", o.width)->capture_default_str();
    synth->add_option("--height", o.height)->capture_default_str();
    synth->add_option("--seed", o.seed)->capture_default_str();
    synth->add_option("--id-prefix", o.id_prefix, "Sample id prefix (defaults to the dataset name)");
    synth->add_flag("--no-masks", o.no_masks, "Do not write masks");

    auto* pre = app.add_subcommand("preprocess", "Green channel, z-score, CLAHE and gamma");
    pre->add_option("--in", o.in, "Input PPM/PGM file");
    pre->add_option("--data", o.data, "Input dataset root");
    pre->add_option("--out", o.out, "Output file (with --in) or dataset root (with --data)")->required();
    pre->add_option("--dataset", o.datasets, "Restrict to these datasets");
    add_preprocess_flags(pre, o);

    auto* train = app.add_subcommand("train", "Train the network, optionally alternating with transfer selection");
    train->add_option("--data", o.data, "Dataset root")->required();
    train->add_option("--target", o.target, "Target dataset names")->required();
    train->add_option("--source", o.source, "Source dataset names");
    train->add_option("--out", o.out, "Checkpoint path")->required();
    train->add_option("--report-dir", o.report_dir, "Write per-round selection reports here");
    train->add_option("--stride", o.stride, "Prediction-grid stride for latents")->capture_default_str();
    train->add_option("--epochs", o.epochs)->capture_default_str();
    train->add_option("--batch", o.batch)->capture_default_str();
    train->add_option("--patches-per-image", o.patches_per_image)->capture_default_str();
    train->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--rounds", o.rounds, "Feature-learning / transfer rounds")->capture_default_str();
    train->add_option("--threads", o.threads, "Worker threads (results do not depend on it)")->capture_default_str();
    train->add_option("--seed", o.seed)->capture_default_str();
    add_network_flags(train, o);
    add_selection_flags(train, o);
    add_preprocess_flags(train, o);

    auto* sel = app.add_subcommand("select-transfer", "Rank source images for transfer");
    sel->add_option("--model", o.model, "Checkpoint path")->required();
    sel->add_option("--data", o.data, "Dataset root")->required();
    sel->add_option("--target", o.target, "Target dataset names")->required();
    sel->add_option("--source", o.source, "Source dataset names")->required();
    sel->add_option("--out", o.out, "Report path (default stdout)");
    sel->add_option("--stride", o.stride)->capture_default_str();
    sel->add_option("--seed", o.seed)->capture_default_str();
    sel->add_option("--ib-lambda", o.ib_lambda, "Also report the bottleneck Lagrangian with this lambda");
    sel->add_option("--bins", o.bins, "Histogram bins for mutual information")->capture_default_str();
    add_selection_flags(sel, o);
    add_preprocess_flags(sel, o);

    auto* pred = app.add_subcommand("predict", "Stitched probability maps");
    pred->add_option("--model", o.model, "Checkpoint path")->required();
    pred->add_option("--in", o.in, "Input image");
    pred->add_option("--data", o.data, "Dataset root");
    pred->add_option("--dataset", o.datasets, "Datasets to predict (with --data)");
    pred->add_option("--out", o.out, "Output PGM (with --in) or directory (with --data)")->required();
    pred->add_option("--stride", o.stride)->capture_default_str();
    pred->add_option("--depth", o.req_depth, "Require this checkpoint depth");
    pred->add_option("--base-channels", o.req_base, "Require this checkpoint base width");
    pred->add_option("--latent-dim", o.req_latent, "Require this checkpoint latent width");
    pred->add_option("--patch-size", o.req_patch, "Require this checkpoint patch size");
    add_preprocess_flags(pred, o);

    auto* ev = app.add_subcommand("evaluate", "Print acc sen spe auc");
    ev->add_option("--pred", o.pred, "Probability map PGM");
    ev->add_option("--truth", o.truth, "Ground-truth mask PGM");
    ev->add_option("--roi", o.roi, "Evaluate only where this mask is set");
    ev->add_option("--pred-dir", o.pred_dir, "Directory of <id>.pgm probability maps");
    ev->add_option("--data", o.data, "Dataset root holding the truth masks");
    ev->add_option("--dataset", o.datasets, "Datasets to evaluate (with --pred-dir)");
    ev->add_option("--roi-dir", o.roi_dir, "Directory of <id>.pgm ROI masks (with --pred-dir)");
    ev->add_option("--threshold", o.threshold)->capture_default_str();

    for (auto* s : app.get_subcommands({})) s->add_option("--config", o.config, "key = value file mirroring the flags");
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Extra arguments from a config file for every option not already given.
inline std::vector<std::string> config_args(const CLI::App& sub, const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(path + ": cannot open config file");
    std::vector<std::string> extra;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        std::replace(key.begin(), key.end(), '_', '-');
        const auto* opt = sub.get_option_no_throw("--" + key);
        if (!opt || key == "config") throw Error(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (opt->count() > 0) continue;
        if (opt->get_expected_min() == 0) {
            if (value == "true" || value == "1") extra.push_back("--" + key);
            continue;
        }
        std::istringstream vs(value);
        std::string item;
        while (vs >> item) {
            extra.push_back("--" + key);
            extra.push_back(item);
        }
    }
    return extra;
}

inline PreprocessConfig preprocess_config(const Options& o)
{
    PreprocessConfig c;
    c.gamma = o.gamma;
    c.clahe.clip_limit = o.clip_limit;
    const auto x = o.tiles.find('x');
    try {
        if (x == std::string::npos) throw std::invalid_argument("tiles");
        c.clahe.tiles_x = std::stoi(o.tiles.substr(0, x));
        c.clahe.tiles_y = std::stoi(o.tiles.substr(x + 1));
    } catch (const std::exception&) {
        throw ConfigError("--tiles must look like <n>x<m>, got '" + o.tiles + "'");
    }
    return c;
}

inline GrayImage read_input_image(const fs::path& p, const PreprocessConfig& pc)
{
    if (p.extension() == ".ppm") return preprocess_rgb(load_ppm(p), pc);
    return load_pgm(p);
}

inline std::vector<SampleRecord> load_records(const Options& o, const std::vector<std::string>& names, Domain domain)
{
    const auto pc = preprocess_config(o);
    auto records = load_dataset(o.data, names, [&](const RgbImage& rgb) { return preprocess_rgb(rgb, pc); });
    for (const auto& n : names) {
        const bool any = std::any_of(records.begin(), records.end(), [&](const auto& r) { return r.dataset_name == n; });
        if (!any) throw ConfigError("dataset '" + n + "' has no entries in " + manifest_path(o.data).string());
    }
    for (auto& r : records) {
        r.domain = domain;
        if (domain == Domain::target && !r.mask) throw ConfigError(r.id + ": target images need masks");
    }
    return records;
}

inline std::string fixed(double v, int places)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(places) << v;
    return os.str();
}

// --- subcommands -----------------------------------------------------------

inline int cmd_synth(const Options& o, std::ostream& out)
{
    const fs::path root = o.out;
    const auto style = o.style == "neuron" ? VesselStyle::neuron : VesselStyle::retina;
    const auto domain = o.domain == "source" ? Domain::source : Domain::target;
    if (domain == Domain::target && o.no_masks) throw ConfigError("synth: target-domain images need masks");
    if (o.count < 1) throw ConfigError("synth: --count must be at least 1");
    std::vector<ManifestEntry> manifest;
    if (fs::exists(manifest_path(root))) manifest = read_manifest(root);
    const std::string prefix = o.id_prefix.empty() ? o.dataset : o.id_prefix;
    for (int i = 0; i < o.count; ++i) {
        char num[16];
        std::snprintf(num, sizeof num, "%03d", i);
        ManifestEntry e{prefix + "_" + num, domain, o.dataset, std::nullopt};
        if (o.label == "similar") e.picture_label = PictureLabel::similar;
        if (o.label == "dissimilar") e.picture_label = PictureLabel::dissimilar;
        const auto s = synth_vessels(Rng::derive(o.seed, static_cast<std::uint64_t>(i)), o.width, o.height, style);
        save_ppm(image_dir(root, o.dataset) / (e.id + ".ppm"), s.image);
        if (!o.no_masks) save_pgm(mask_file(root, e), s.mask);
        upsert_manifest(manifest, e);
    }
    write_manifest(root, manifest);
    out << "wrote " << o.count << " " << o.style << " images to " << (root / o.dataset).string() << "\n";
    return 0;
}

inline int cmd_preprocess(const Options& o, std::ostream& out)
{
    const auto pc = preprocess_config(o);
    if (!o.in.empty() == !o.data.empty()) throw ConfigError("preprocess: give exactly one of --in or --data");
    if (!o.in.empty()) {
        const fs::path in = o.in;
        const GrayImage green = in.extension() == ".ppm" ? green_channel(load_ppm(in)) : load_pgm(in);
        save_pgm(o.out, preprocess(green, pc));
        out << "wrote " << o.out << "\n";
        return 0;
    }
    const fs::path src = o.data, dst = o.out;
    std::vector<ManifestEntry> manifest;
    if (fs::exists(manifest_path(dst))) manifest = read_manifest(dst);
    int n = 0;
    for (const auto& e : read_manifest(src)) {
        if (!o.datasets.empty() && std::find(o.datasets.begin(), o.datasets.end(), e.dataset_name) == o.datasets.end())
            continue;
        const auto r = load_sample(src, e);
        save_pgm(image_dir(dst, e.dataset_name) / (e.id + ".pgm"), preprocess(r.image, pc));
        if (r.mask) save_pgm(mask_file(dst, e), *r.mask);
        upsert_manifest(manifest, e);
        ++n;
    }
    write_manifest(dst, manifest);
    out << "preprocessed " << n << " images into " << dst.string() << "\n";
    return 0;
}

inline LoopConfig loop_config(const Options& o)
{
    LoopConfig lc;
    lc.rounds = o.rounds;
    lc.threshold = o.threshold;
    lc.stride = o.stride;
    lc.kmeans.k = o.k;
    lc.kmeans.max_iter = o.max_iter;
    lc.kmeans.tol = o.tol;
    lc.kmeans.seed = o.seed;
    return lc;
}

inline int cmd_train(const Options& o, std::ostream& out)
{
    NetworkSpec spec{o.depth, o.base_channels, o.latent_dim, o.patch_size, o.seed};
    validate(spec);
    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch = o.batch;
    tc.patches_per_image = o.patches_per_image;
    tc.adam.lr = o.lr;
    tc.seed = o.seed;
    tc.threads = o.threads;
    const auto target = load_records(o, o.target, Domain::target);
    const auto sources = o.source.empty() ? std::vector<SampleRecord>{} : load_records(o, o.source, Domain::source);

    const auto res = two_stage_loop(target, sources, spec, tc, loop_config(o));
    for (std::size_t r = 0; r < res.loss_histories.size(); ++r)
        for (std::size_t e = 0; e < res.loss_histories[r].size(); ++e)
            out << "round " << r + 1 << " epoch " << e + 1 << " loss " << fixed(res.loss_histories[r][e], 6) << "\n";
    for (std::size_t r = 0; r < res.selections.size(); ++r) {
        const auto& s = res.selections[r];
        out << "round " << r + 1 << " accepted " << s.accepted_ids().size() << "/" << s.records.size() << " sources\n";
        if (!o.report_dir.empty()) {
            fs::create_directories(o.report_dir);
            std::ofstream f(fs::path(o.report_dir) / ("round_" + std::to_string(r + 1) + ".tsv"));
            write_selection(f, s, static_cast<int>(r + 1));
        }
    }
    for (const auto& id : res.accepted_unmasked) out << "accepted without mask (not trained on): " << id << "\n";
    save_checkpoint(res.model, o.out);
    out << "saved " << o.out << "\n";
    return 0;
}

inline int cmd_select(const Options& o, std::ostream& out)
{
    const auto model = load_checkpoint(o.model);
    const auto target = load_records(o, o.target, Domain::target);
    const auto sources = load_records(o, o.source, Domain::source);
    const auto sel = select_transfer(model, target, sources, loop_config(o));

    std::ostringstream report;
    if (o.ib_lambda) {
        const auto s = ib_samples(model, target, o.stride);
        const auto ib = ib_report(s.latents, s.input_means, s.vessel_fractions, *o.ib_lambda, o.bins);
        report << "# ib I_xz=" << fixed(ib.I_xz, 6) << " I_zy=" << fixed(ib.I_zy, 6) << " H_y=" << fixed(ib.H_y, 6)
               << " lambda=" << fixed(ib.lambda, 6) << " lagrangian=" << fixed(ib.lagrangian, 6) << "\n";
    }
    write_selection(report, sel);
    if (o.out.empty()) {
        out << report.str();
    } else {
        if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
        std::ofstream f(o.out, std::ios::trunc);
        f << report.str();
        if (!f) throw Error(o.out + ": write failed");
    }
    return 0;
}

inline int cmd_predict(const Options& o, std::ostream& out)
{
    const auto model = load_checkpoint(o.model, SpecRequirement{o.req_depth, o.req_base, o.req_latent, o.req_patch});
    const auto pc = preprocess_config(o);
    if (!o.in.empty() == !o.data.empty()) throw ConfigError("predict: give exactly one of --in or --data");
    if (!o.in.empty()) {
        save_pgm(o.out, predict_image(model, read_input_image(o.in, pc), o.stride));
        out << "wrote " << o.out << "\n";
        return 0;
    }
    if (o.datasets.empty()) throw ConfigError("predict: --data needs at least one --dataset");
    const auto records = load_dataset(o.data, o.datasets, [&](const RgbImage& rgb) { return preprocess_rgb(rgb, pc); });
    for (const auto& r : records) save_pgm(fs::path(o.out) / (r.id + ".pgm"), predict_image(model, r.image, o.stride));
    out << "wrote " << records.size() << " probability maps to " << o.out << "\n";
    return 0;
}

inline int cmd_evaluate(const Options& o, std::ostream& out)
{
    std::vector<EvalItem> items;
    if (!o.pred.empty()) {
        if (o.truth.empty()) throw ConfigError("evaluate: --pred needs --truth");
        EvalItem it{load_pgm(o.pred), load_mask(o.truth), std::nullopt};
        if (!o.roi.empty()) it.roi = load_mask(o.roi);
        items.push_back(std::move(it));
    } else if (!o.pred_dir.empty()) {
        if (o.data.empty() || o.datasets.empty()) throw ConfigError("evaluate: --pred-dir needs --data and --dataset");
        for (const auto& e : read_manifest(o.data)) {
            if (std::find(o.datasets.begin(), o.datasets.end(), e.dataset_name) == o.datasets.end()) continue;
            EvalItem it{load_pgm(fs::path(o.pred_dir) / (e.id + ".pgm")), load_mask(mask_file(o.data, e)), std::nullopt};
            if (!o.roi_dir.empty()) it.roi = load_mask(fs::path(o.roi_dir) / (e.id + ".pgm"));
            items.push_back(std::move(it));
        }
        if (items.empty()) throw ConfigError("evaluate: no records in the requested datasets");
    } else {
        throw ConfigError("evaluate: give --pred/--truth or --pred-dir/--data/--dataset");
    }
    out << evaluate(items, o.threshold).line() << "\n";
    return 0;
}

inline int dispatch(const CLI::App& app, const Options& o, std::ostream& out)
{
    const auto* sub = app.get_subcommands().front();
    const auto& name = sub->get_name();
    if (name == "synth") return cmd_synth(o, out);
    if (name == "preprocess") return cmd_preprocess(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "select-transfer") return cmd_select(o, out);
    if (name == "predict") return cmd_predict(o, out);
    return cmd_evaluate(o, out);
}

inline void parse(CLI::App& app, std::vector<std::string> args)
{
    std::reverse(args.begin(), args.end());
    app.parse(args);
}

} // namespace detail

/// Runs one CLI invocation; `args` excludes the program name.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Patch-based retinal vessel segmentation with latent-space transfer selection", "drvessel"};
    Options o;
    detail::build_app(app, o);
    try {
        detail::parse(app, args);
        if (!o.config.empty()) {
            auto extra = detail::config_args(*app.get_subcommands().front(), o.config);
            if (!extra.empty()) {
                auto merged = args;
                merged.insert(merged.end(), extra.begin(), extra.end());
                CLI::App again{app.get_description(), app.get_name()};
                Options o2;
                detail::build_app(again, o2);
                detail::parse(again, merged);
                return detail::dispatch(again, o2, out);
            }
        }
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    try {
        return detail::dispatch(app, o, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

} // namespace drvessel::cli
