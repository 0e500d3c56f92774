#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vsens/bench.hpp"
#include "vsens/checkpoint.hpp"
#include "vsens/engine.hpp"
#include "vsens/model.hpp"
#include "vsens/relevance.hpp"
#include "vsens/series.hpp"

namespace vsens::cli {

using real = float;

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

inline std::vector<std::size_t> parse_indices(const std::string& s) {
    std::vector<std::size_t> out;
    for (const auto& part : split(s, ',')) out.push_back(std::stoull(part));
    return out;
}

inline std::vector<std::pair<std::size_t, std::size_t>> parse_pairs(const std::string& s) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& part : split(s, ',')) {
        const auto ab = split(part, ':');
        if (ab.size() != 2)
            throw std::runtime_error("expected factor pairs as a:b, got '" + part + "'");
        out.emplace_back(std::stoull(ab[0]), std::stoull(ab[1]));
    }
    return out;
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory '" + dir + "'");
}

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << content;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

// ---------------------------------------------------------------------------
// option groups
// ---------------------------------------------------------------------------

struct data_opts {
    std::string kind = "synthetic-uncorrelated";
    std::size_t m = 8;
    std::size_t t = 4096;
    std::string targets = "1";
    std::string factor_pairs = "1:2";
    std::size_t frequencies = 3;
    std::string csv;
    std::string virtual_names;
    double train_fraction = 0.8;

    void attach(CLI::App* cmd) {
        cmd->add_option("--data-kind", kind, "dataset source")
            ->check(CLI::IsMember({"synthetic-uncorrelated", "synthetic-nonlinear", "csv"}));
        cmd->add_option("--m", m, "number of input signals (synthetic)");
        cmd->add_option("--t", t, "number of samples (synthetic)");
        cmd->add_option("--targets", targets, "replicated input indices, 1-based, comma separated");
        cmd->add_option("--factor-pairs", factor_pairs, "product factors as a:b, comma separated");
        cmd->add_option("--frequencies", frequencies, "sinusoids per synthetic signal");
        cmd->add_option("--csv", csv, "CSV dataset path");
        cmd->add_option("--virtual", virtual_names, "virtual-sensor column names for --csv");
        cmd->add_option("--train-fraction", train_fraction, "leading fraction used for training");
    }

    series_family resolve(std::uint64_t seed) const {
        if (kind == "synthetic-uncorrelated")
            return generate_synthetic_uncorrelated(m, t, detail::parse_indices(targets), frequencies,
                                                   seed);
        if (kind == "synthetic-nonlinear")
            return generate_synthetic_nonlinear(m, t, detail::parse_pairs(factor_pairs), frequencies,
                                                seed);
        if (csv.empty()) throw std::runtime_error("--data-kind csv requires --csv");
        std::unordered_map<std::string, series_role> roles;
        for (const auto& name : detail::split(virtual_names, ','))
            roles[name] = series_role::virtual_sensor;
        if (roles.empty()) throw std::runtime_error("--csv requires --virtual column names");
        return load_csv(csv, roles);
    }
};

struct model_opts {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 64;
    std::size_t hidden = 64;
    std::size_t patch = 16;
    double dropout = 0.0;
    std::string decoding = "forecast";

    void attach(CLI::App* cmd) {
        cmd->add_option("--layers", layers, "transformer layers");
        cmd->add_option("--heads", heads, "attention heads");
        cmd->add_option("--dim", dim, "token dimension");
        cmd->add_option("--hidden", hidden, "MLP hidden width");
        cmd->add_option("--patch", patch, "patch length");
        cmd->add_option("--dropout", dropout, "dropout rate");
        cmd->add_option("--decoding", decoding,
                        "virtual-sensor token target: its next patch (forecast) or its own slot "
                        "(nowcast)")
            ->check(CLI::IsMember({"forecast", "nowcast"}));
    }

    model_config config() const {
        model_config cfg;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.dim = dim;
        cfg.hidden = hidden;
        cfg.patch_len = patch;
        cfg.dropout = dropout;
        cfg.decoding = decoding == "nowcast" ? decoding_mode::nowcast : decoding_mode::forecast;
        cfg.validate();
        return cfg;
    }
};

struct train_opts {
    std::size_t n_train = 1;
    std::size_t batch = 8;
    std::size_t epochs = 80;
    std::size_t patience = 9;
    double lr = 5e-4;
    std::size_t warmup = 0;
    double warmup_start = 0.5;
    std::size_t decay_step = 0;
    double decay_gamma = 0.98;
    std::size_t context = 2;
    std::size_t horizon = 2;
    std::size_t stride = 0;  // 0 -> patch length
    long long sparsify_epoch = -1;
    double sparsify_threshold = -std::numeric_limits<double>::infinity();

    void attach(CLI::App* cmd) {
        cmd->add_option("--n-train", n_train, "virtual sensors sampled per iteration");
        cmd->add_option("--batch", batch, "batch size");
        cmd->add_option("--epochs", epochs, "max epochs");
        cmd->add_option("--patience", patience, "early stopping patience");
        cmd->add_option("--lr", lr, "base learning rate");
        cmd->add_option("--warmup", warmup, "learning rate warm-up iterations");
        cmd->add_option("--warmup-start", warmup_start, "warm-up start factor");
        cmd->add_option("--decay-step", decay_step, "decay step size (0 = none)");
        cmd->add_option("--decay-gamma", decay_gamma, "decay gamma");
        cmd->add_option("--train-context", context, "context slots per training window");
        cmd->add_option("--train-horizon", horizon, "horizon slots per training window");
        cmd->add_option("--stride", stride, "window stride in samples (0 = patch length)");
        cmd->add_option("--sparsify-epoch", sparsify_epoch,
                        "epoch after which training prunes to union input sets (-1 = never)");
        cmd->add_option("--sparsify-threshold", sparsify_threshold,
                        "relevance threshold for sparsified training");
    }

    train_config config(std::uint64_t seed, std::size_t patch_len, double train_fraction) const {
        train_config tc;
        tc.n_train = n_train;
        tc.batch_size = batch;
        tc.epochs = epochs;
        tc.patience = patience;
        tc.seed = seed;
        tc.lr = lr_schedule{lr, warmup, warmup_start, decay_step, decay_gamma};
        tc.train_fraction = train_fraction;
        tc.window = window_spec{context, horizon, patch_len, stride == 0 ? patch_len : stride};
        tc.sparsify_epoch = sparsify_epoch;
        tc.sparsify_threshold = sparsify_threshold;
        return tc;
    }
};

struct request_opts {
    std::string sensors = "all";
    std::size_t context = 2;
    std::size_t cycles = 6;
    double threshold = -std::numeric_limits<double>::infinity();

    void attach(CLI::App* cmd) {
        cmd->add_option("--sensors", sensors, "virtual sensors to predict: 'all' or 1-based list");
        cmd->add_option("--context", context, "context slots before the first prediction");
        cmd->add_option("--cycles", cycles, "autoregressive generation cycles");
        cmd->add_option("--threshold", threshold, "relevance threshold (-inf = dense)");
    }

    forecast_request request(std::size_t n) const {
        forecast_request req;
        if (sensors == "all") {
            for (std::size_t j = 0; j < n; ++j) req.sensors.push_back(j);
        } else {
            for (auto j : detail::parse_indices(sensors)) {
                if (j < 1 || j > n)
                    throw std::runtime_error("sensor index " + std::to_string(j) + " out of [1, " +
                                             std::to_string(n) + "]");
                req.sensors.push_back(j - 1);
            }
        }
        req.context_slots = context;
        req.cycles = cycles;
        req.threshold = threshold;
        req.validate(n);
        return req;
    }
};

// ---------------------------------------------------------------------------
// shared command plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void write_metrics(const std::string& path, const std::vector<epoch_metrics>& history) {
    std::ostringstream out;
    out << "epoch,train_loss,val_loss,learning_rate,wall_clock_s\n";
    for (const auto& em : history)
        out << em.epoch << ',' << format_double(em.train_loss) << ',' << format_double(em.val_loss)
            << ',' << format_double(em.learning_rate) << ',' << format_double(em.seconds) << "\n";
    write_text(path, out.str());
}

inline void write_resolved_config(CLI::App& app, const std::string& dir) {
    write_text(dir + "/config.ini", app.config_to_str(true, true));
}

inline void print_epoch(const epoch_metrics& em) {
    std::cout << "epoch " << em.epoch << " train " << format_double(em.train_loss) << " val "
              << format_double(em.val_loss) << " lr " << format_double(em.learning_rate) << " "
              << format_double(em.seconds) << "s\n";
}

struct loaded_model {
    checkpoint_data<real> ckpt;
    family_layout layout;
};

// load a checkpoint and verify the dataset matches its column metadata
inline loaded_model load_for(const std::string& checkpoint_path, const series_family& fam) {
    loaded_model lm;
    lm.ckpt = load_checkpoint<real>(checkpoint_path);
    if (lm.ckpt.names != fam.names)
        throw std::runtime_error("dataset columns do not match checkpoint '" + checkpoint_path +
                                 "'");
    for (std::size_t c = 0; c < fam.cols(); ++c)
        if (lm.ckpt.roles[c] != fam.roles[c])
            throw std::runtime_error("column role mismatch for '" + fam.names[c] + "'");
    lm.layout = family_layout::of(fam);
    return lm;
}

inline std::vector<series_window> eval_windows_for(const series_family& fam, const norm_stats& st,
                                                   double train_fraction, std::size_t context,
                                                   std::size_t cycles, std::size_t patch,
                                                   std::size_t stride) {
    window_spec spec{context, cycles, patch, stride == 0 ? (context + cycles) * patch : stride};
    return make_validation_windows(fam, spec, st, train_fraction);
}

inline std::string threshold_str(double t) {
    return t == -std::numeric_limits<double>::infinity() ? "-inf" : format_double(t);
}

template <class T>
std::vector<input_set> sets_at(model_params<T>& params, const family_layout& layout,
                               const std::vector<std::size_t>& sensors, double threshold) {
    std::vector<input_set> sets;
    for (auto j : sensors) sets.push_back(sparsify(params.relevance, layout, j, threshold));
    return sets;
}

// log-spaced relevance thresholds spanning dense to heavily pruned
template <class T>
std::vector<double> auto_thresholds(model_params<T>& params,
                                    const std::vector<std::size_t>& sensors, std::size_t points) {
    std::vector<double> values;
    for (auto j : sensors) {
        const T* r = params.relevance.rows.data() + j * params.relevance.variates();
        for (std::size_t v = 0; v < params.relevance.variates(); ++v)
            values.push_back(static_cast<double>(r[v]));
    }
    std::sort(values.begin(), values.end(), std::greater<double>());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<double> thresholds{-std::numeric_limits<double>::infinity()};
    if (values.size() > 1 && points > 1) {
        for (std::size_t i = 0; i < points; ++i) {
            const double frac = static_cast<double>(i) / static_cast<double>(points - 1);
            const auto rank = static_cast<std::size_t>(
                std::round(std::pow(static_cast<double>(values.size()), 1.0 - frac)));
            thresholds.push_back(values[std::max<std::size_t>(rank, 1) - 1]);
        }
    }
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    return thresholds;
}

struct sweep_row {
    double threshold = 0.0;
    double sparsity = 0.0;
    std::size_t universe = 0;
    std::size_t tokens_total = 0;
    double analytic_flops = 0.0;
    double measured_flops = 0.0;
    double median_ms = 0.0;
    double mad_ms = 0.0;
    std::uint64_t activation_bytes = 0;
    double mse = 0.0;
};

// one sweep point: sparsity, token counts, analytic + instrumented cost,
// median wall-clock, peak activation bytes, and validation MSE
inline sweep_row sweep_point(model_params<real>& params, const family_layout& layout,
                             const std::vector<series_window>& windows, const forecast_request& req,
                             std::size_t reps, std::size_t warmups) {
    sweep_row row;
    row.threshold = req.threshold;
    const auto universe =
        vsens::detail::request_universe(params, layout, req.sensors, req.threshold);
    row.universe = universe.size();
    row.sparsity = sparsity_of(universe.size(), layout.num_variates());

    auto one = [&] { (void)autoregressive_forecast(params, layout, windows.front(), req); };
    reset_matmul_flops();
    auto res = autoregressive_forecast(params, layout, windows.front(), req);
    row.measured_flops = static_cast<double>(matmul_flops());
    for (auto s : res.tokens_per_cycle) {
        row.tokens_total += s;
        row.analytic_flops += estimate_ops(s, params.cfg).total;
    }
    const std::uint64_t live0 = live_allocation_bytes();
    reset_peak_allocation();
    one();
    row.activation_bytes = peak_allocation_bytes() - live0;
    auto stats = profile(one, warmups, reps);
    row.median_ms = stats.median_ns / 1e6;
    row.mad_ms = stats.spread_ns / 1e6;

    double err = 0.0;
    for (const auto& win : windows) {
        auto r = autoregressive_forecast(params, layout, win, req);
        double m = 0.0;
        for (auto v : r.mse_per_sensor) m += v;
        err += m / static_cast<double>(r.mse_per_sensor.size());
    }
    row.mse = err / static_cast<double>(windows.size());
    return row;
}

inline std::string sweep_csv(const std::vector<sweep_row>& rows) {
    std::ostringstream out;
    out << "threshold,sparsity,universe,tokens_total,analytic_flops,measured_flops,median_ms,"
           "mad_ms,activation_bytes,mse\n";
    for (const auto& r : rows)
        out << threshold_str(r.threshold) << ',' << format_double(r.sparsity) << ',' << r.universe
            << ',' << r.tokens_total << ',' << format_double(r.analytic_flops) << ','
            << format_double(r.measured_flops) << ',' << format_double(r.median_ms) << ','
            << format_double(r.mad_ms) << ',' << r.activation_bytes << ','
            << format_double(r.mse) << "\n";
    return out.str();
}

inline std::vector<sweep_row> parse_sweep_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open sweep file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty sweep file '" + path + "'");
    std::vector<sweep_row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 10) throw std::runtime_error("malformed sweep row: '" + line + "'");
        sweep_row r;
        r.threshold = f[0] == "-inf" ? -std::numeric_limits<double>::infinity() : std::stod(f[0]);
        r.sparsity = std::stod(f[1]);
        r.universe = std::stoull(f[2]);
        r.tokens_total = std::stoull(f[3]);
        r.analytic_flops = std::stod(f[4]);
        r.measured_flops = std::stod(f[5]);
        r.median_ms = std::stod(f[6]);
        r.mad_ms = std::stod(f[7]);
        r.activation_bytes = std::stoull(f[8]);
        r.mse = std::stod(f[9]);
        rows.push_back(r);
    }
    return rows;
}

} // namespace detail

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

// Runs one subcommand. Returns 0 on success, 1 on runtime failure, 2 on
// usage errors; every run writes the resolved configuration next to its
// outputs.
inline int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"vsens: a unified virtual-sensor transformer"};
    app.require_subcommand(1);
    app.fallthrough();  // --seed and --config may appear after the subcommand
    app.set_config("--config", "", "flat key=value config file; flags override");
    app.allow_config_extras(CLI::config_extras_mode::error);

    std::uint64_t seed = 2025;
    app.add_option("--seed", seed, "run seed; all randomness derives from it")
        ->configurable(true);

    data_opts data;
    model_opts model;
    train_opts train;
    request_opts request;
    std::string out_dir = "runs/out";
    std::string out_file = "data.csv";
    std::string checkpoint_path;
    std::string methods = "learned,correlation,random";
    std::string thresholds_arg;
    std::string sweep_path;
    std::size_t window_index = 0;
    std::size_t eval_stride = 0;
    std::size_t k = 4;
    std::size_t points = 12;
    std::size_t reps = 5;
    std::size_t warmups = 3;
    std::size_t eval_windows = 4;
    std::size_t subsets = 4;
    bool with_profile = false;
    bool flag_uncorrelated = false;
    bool flag_nonlinear = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset as CSV");
    data.attach(gen);
    gen->add_flag("--synthetic-uncorrelated", flag_uncorrelated,
                  "uncorrelated signals with replicated targets");
    gen->add_flag("--synthetic-nonlinear", flag_nonlinear, "product-of-factors virtual sensors");
    gen->add_option("--out", out_file, "output CSV path");

    auto* tr = app.add_subcommand("train", "teacher-forcing training run");
    data.attach(tr);
    model.attach(tr);
    train.attach(tr);
    tr->add_option("--out", out_dir, "output directory");

    auto* ft = app.add_subcommand("finetune-bptt", "BPTT fine-tuning from a checkpoint");
    data.attach(ft);
    train.attach(ft);
    request.attach(ft);
    ft->add_option("--checkpoint", checkpoint_path, "teacher-forcing checkpoint")->required();
    ft->add_option("--out", out_dir, "output directory");

    auto* fc = app.add_subcommand("forecast", "autoregressive forecast of one validation window");
    data.attach(fc);
    request.attach(fc);
    fc->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    fc->add_option("--window", window_index, "validation window index");
    fc->add_flag("--profile", with_profile, "add wall-clock statistics to the report");
    fc->add_option("--out", out_dir, "output directory");

    auto* ev = app.add_subcommand("eval", "mean MSE over all validation windows");
    data.attach(ev);
    request.attach(ev);
    ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ev->add_option("--eval-stride", eval_stride, "window stride (0 = disjoint windows)");
    ev->add_option("--out", out_dir, "output directory");

    auto* rel = app.add_subcommand("relevance", "signal-relevance tooling");
    rel->require_subcommand(1);
    auto* rexp = rel->add_subcommand("export", "ranked relevance report per sensor");
    data.attach(rexp);
    request.attach(rexp);
    rexp->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    rexp->add_option("--out", out_dir, "output directory");
    auto* rsp = rel->add_subcommand("sparsify", "input sets at a threshold");
    data.attach(rsp);
    request.attach(rsp);
    rsp->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    rsp->add_option("--out", out_dir, "output directory");
    auto* rcmp = rel->add_subcommand("compare", "learned vs correlation vs random input sets");
    data.attach(rcmp);
    request.attach(rcmp);
    rcmp->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    rcmp->add_option("--methods", methods, "comma list of learned,correlation,random");
    rcmp->add_option("--k", k, "retained inputs per sensor (matched sparsity)");
    rcmp->add_option("--eval-stride", eval_stride, "window stride (0 = disjoint windows)");
    rcmp->add_option("--out", out_dir, "output directory");

    auto* bench = app.add_subcommand("bench", "efficiency instrumentation");
    bench->require_subcommand(1);
    auto* bsw = bench->add_subcommand("sweep", "threshold sweep: sparsity vs cost vs MSE");
    data.attach(bsw);
    request.attach(bsw);
    bsw->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    bsw->add_option("--thresholds", thresholds_arg, "explicit thresholds (default: auto)");
    bsw->add_option("--points", points, "auto threshold count");
    bsw->add_option("--reps", reps, "timing repetitions per point");
    bsw->add_option("--warmups", warmups, "discarded warm-up runs per point");
    bsw->add_option("--eval-windows", eval_windows, "validation windows per MSE estimate");
    bsw->add_option("--out", out_dir, "output directory");
    auto* bsel = bench->add_subcommand("select", "sparsity and cost vs number of selected sensors");
    data.attach(bsel);
    request.attach(bsel);
    bsel->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    bsel->add_option("--subsets", subsets, "random subsets per size");
    bsel->add_option("--reps", reps, "timing repetitions per point");
    bsel->add_option("--out", out_dir, "output directory");
    auto* bsl = bench->add_subcommand("slopes", "two-regime scaling-slope fit of a sweep");
    data.attach(bsl);
    request.attach(bsl);
    bsl->add_option("--checkpoint", checkpoint_path, "model checkpoint (to run a fresh sweep)");
    bsl->add_option("--sweep", sweep_path, "existing sweep.csv (skips the fresh sweep)");
    bsl->add_option("--points", points, "auto threshold count");
    bsl->add_option("--reps", reps, "timing repetitions per point");
    bsl->add_option("--warmups", warmups, "discarded warm-up runs per point");
    bsl->add_option("--eval-windows", eval_windows, "validation windows per MSE estimate");
    bsl->add_option("--out", out_dir, "output directory");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            if (flag_uncorrelated) data.kind = "synthetic-uncorrelated";
            if (flag_nonlinear) data.kind = "synthetic-nonlinear";
            auto fam = data.resolve(seed);
            write_csv(fam, out_file);
            std::cout << "wrote " << out_file << ": " << fam.samples << " samples, "
                      << fam.num_inputs() << " inputs, " << fam.num_virtual()
                      << " virtual sensors\nvirtual columns:";
            for (auto c : fam.virtual_columns()) std::cout << ' ' << fam.names[c];
            std::cout << "\n";
            return 0;
        }

        if (tr->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto layout = family_layout::of(fam);
            auto stats = compute_norm_stats(fam, data.train_fraction);
            auto cfg = model.config();
            auto tc = train.config(seed, cfg.patch_len, data.train_fraction);
            rng init = rng::stream(seed, "init");
            auto params = model_params<real>::init(cfg, fam.num_inputs(), fam.num_virtual(), init);
            auto train_w = make_train_windows(fam, tc.window, stats, data.train_fraction);
            auto val_w = make_validation_windows(fam, tc.window, stats, data.train_fraction);
            std::cout << "training on " << train_w.size() << " windows, validating on "
                      << val_w.size() << " (" << params.param_count() << " parameters)\n";
            auto result = train_model<real>(
                params, layout, train_w, val_w, tc,
                [](const epoch_metrics& em, model_params<real>&) { detail::print_epoch(em); });
            detail::write_resolved_config(app, out_dir);
            detail::write_metrics(out_dir + "/metrics.csv", result.history);
            save_checkpoint(out_dir + "/checkpoint.bin", params, fam.names, fam.roles, stats);
            std::cout << "best validation loss " << detail::format_double(result.best_val)
                      << " at epoch " << result.best_epoch << "; checkpoint written to " << out_dir
                      << "/checkpoint.bin\n";
            return 0;
        }

        if (ft->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            auto tc = train.config(seed, params.cfg.patch_len, data.train_fraction);
            tc.window = window_spec{request.context, request.cycles, params.cfg.patch_len,
                                    train.stride == 0 ? params.cfg.patch_len : train.stride};
            auto train_w = make_train_windows(fam, tc.window, lm.ckpt.stats, data.train_fraction);
            auto val_w = make_validation_windows(fam, tc.window, lm.ckpt.stats, data.train_fraction);
            std::cout << "fine-tuning with " << request.cycles << " cycles on " << train_w.size()
                      << " windows\n";
            auto result = bptt_finetune<real>(
                params, lm.layout, train_w, val_w, tc, request.context, request.cycles,
                [](const epoch_metrics& em, model_params<real>&) { detail::print_epoch(em); });
            detail::write_resolved_config(app, out_dir);
            detail::write_metrics(out_dir + "/metrics.csv", result.history);
            save_checkpoint(out_dir + "/checkpoint.bin", params, fam.names, fam.roles,
                            lm.ckpt.stats);
            std::cout << "best validation mse " << detail::format_double(result.best_val)
                      << " at epoch " << result.best_epoch << "; checkpoint written to " << out_dir
                      << "/checkpoint.bin\n";
            return 0;
        }

        if (fc->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            auto windows = detail::eval_windows_for(fam, lm.ckpt.stats, data.train_fraction,
                                                    request.context, request.cycles,
                                                    params.cfg.patch_len, 0);
            if (window_index >= windows.size())
                throw std::runtime_error("window index " + std::to_string(window_index) +
                                         " out of " + std::to_string(windows.size()) +
                                         " validation windows");
            auto req = request.request(params.n);
            auto res = autoregressive_forecast(params, lm.layout, windows[window_index], req);

            nlohmann::ordered_json report;
            report["window_index"] = window_index;
            report["context_slots"] = res.context_slots;
            report["cycles"] = res.cycles;
            report["patch_len"] = res.patch_len;
            report["threshold"] = detail::threshold_str(req.threshold);
            report["sparsity"] = sparsity_of(
                vsens::detail::request_universe(params, lm.layout, req.sensors, req.threshold)
                    .size(),
                lm.layout.num_variates());
            report["tokens_per_cycle"] = res.tokens_per_cycle;
            auto sensors_json = nlohmann::ordered_json::array();
            double mse_sum = 0.0;
            for (std::size_t si = 0; si < req.sensors.size(); ++si) {
                const std::size_t col = lm.layout.virtual_column[req.sensors[si]];
                nlohmann::ordered_json s;
                s["sensor"] = fam.names[col];
                s["mse_normalized"] = res.mse_per_sensor[si];
                mse_sum += res.mse_per_sensor[si];
                s["predictions_normalized"] = res.predictions[si];
                std::vector<double> denorm;
                denorm.reserve(res.predictions[si].size());
                for (double v : res.predictions[si])
                    denorm.push_back(lm.ckpt.stats.denormalize(v, col));
                s["predictions"] = denorm;
                sensors_json.push_back(std::move(s));
            }
            report["sensors"] = std::move(sensors_json);
            if (with_profile) {
                auto stats = profile(
                    [&] {
                        (void)autoregressive_forecast(params, lm.layout, windows[window_index],
                                                      req);
                    },
                    warmups, reps);
                report["wall_clock_median_ms"] = stats.median_ns / 1e6;
                report["wall_clock_mad_ms"] = stats.spread_ns / 1e6;
            }
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/forecast.json", report.dump(2) + "\n");
            std::cout << "forecast written to " << out_dir << "/forecast.json (mean mse "
                      << detail::format_double(mse_sum / req.sensors.size()) << ")\n";
            return 0;
        }

        if (ev->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            auto windows =
                detail::eval_windows_for(fam, lm.ckpt.stats, data.train_fraction, request.context,
                                         request.cycles, params.cfg.patch_len, eval_stride);
            auto req = request.request(params.n);
            auto rep = evaluate(params, lm.layout, windows, req);

            nlohmann::ordered_json report;
            report["windows"] = rep.windows;
            report["context_slots"] = request.context;
            report["cycles"] = request.cycles;
            report["threshold"] = detail::threshold_str(req.threshold);
            report["sparsity"] = rep.sparsity;
            report["tokens_per_cycle"] = rep.tokens_per_cycle;
            report["mse_mean"] = rep.mse_mean;
            nlohmann::ordered_json per;
            for (std::size_t si = 0; si < req.sensors.size(); ++si)
                per[fam.names[lm.layout.virtual_column[req.sensors[si]]]] = rep.mse_per_sensor[si];
            report["mse_per_sensor"] = std::move(per);
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/eval.json", report.dump(2) + "\n");
            std::cout << "eval over " << rep.windows << " windows: mean mse "
                      << detail::format_double(rep.mse_mean) << " at sparsity "
                      << detail::format_double(rep.sparsity) << "\n";
            return 0;
        }

        if (rexp->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            std::ostringstream out;
            out << "# signal relevance report\n";
            out << "sensors: " << params.n << ", variates: " << lm.layout.num_variates()
                << ", threshold: " << detail::threshold_str(request.threshold) << "\n";
            for (std::size_t j = 0; j < params.n; ++j) {
                const std::size_t own = lm.layout.virtual_column[j];
                auto set = sparsify(params.relevance, lm.layout, j, request.threshold);
                out << "\nsensor " << fam.names[own] << " (variate " << own + 1 << ")\n";
                out << "  retained " << set.variates.size() << "/" << lm.layout.num_variates()
                    << ", sparsity "
                    << detail::format_double(
                           sparsity_of(set.variates.size(), lm.layout.num_variates()))
                    << "\n  retained set:";
                for (auto v : set.variates) out << ' ' << fam.names[v];
                out << "\n  ranked relevance:\n";
                const real* r = params.relevance.rows.data() + j * params.relevance.variates();
                std::vector<std::pair<double, std::size_t>> ranked;
                for (std::size_t v = 0; v < lm.layout.num_variates(); ++v)
                    ranked.emplace_back(-static_cast<double>(r[v]), v);
                std::sort(ranked.begin(), ranked.end());
                for (std::size_t i = 0; i < ranked.size(); ++i)
                    out << "    " << i + 1 << ". " << fam.names[ranked[i].second] << " "
                        << detail::format_double(-ranked[i].first) << "\n";
            }
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/relevance.txt", out.str());
            std::cout << out.str();
            return 0;
        }

        if (rsp->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            std::vector<std::size_t> all;
            for (std::size_t j = 0; j < params.n; ++j) all.push_back(j);
            auto sets = detail::sets_at(params, lm.layout, all, request.threshold);
            std::ostringstream out;
            out << "# input sets at threshold " << detail::threshold_str(request.threshold) << "\n";
            for (const auto& set : sets) {
                out << "sensor " << fam.names[lm.layout.virtual_column[set.sensor]] << " ("
                    << set.variates.size() << " variates, sparsity "
                    << detail::format_double(
                           sparsity_of(set.variates.size(), lm.layout.num_variates()))
                    << "):";
                for (auto v : set.variates) out << ' ' << fam.names[v];
                out << "\n";
            }
            const auto uni = union_variates(sets);
            out << "union: " << uni.size() << " variates, sparsity "
                << detail::format_double(sparsity_of(uni.size(), lm.layout.num_variates())) << "\n";
            if (sets.size() >= 2) {
                out << "mean pairwise jaccard similarity: "
                    << detail::format_double(set_similarity(sets)) << "\n";
                out << "mean pairwise shared fraction: "
                    << detail::format_double(set_overlap_fraction(sets)) << "\n";
            }
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/input_sets.txt", out.str());
            std::cout << out.str();
            return 0;
        }

        if (rcmp->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            auto windows =
                detail::eval_windows_for(fam, lm.ckpt.stats, data.train_fraction, request.context,
                                         request.cycles, params.cfg.patch_len, eval_stride);
            std::ostringstream out;
            out << "method,k,sparsity,mse\n";
            std::cout << "comparing relevance methods at k=" << k << " over " << windows.size()
                      << " windows\n";
            for (const auto& method : detail::split(methods, ',')) {
                std::vector<input_set> sets;
                for (std::size_t j = 0; j < params.n; ++j) {
                    if (method == "learned")
                        sets.push_back(learned_topk(params.relevance, lm.layout, j, k));
                    else if (method == "correlation")
                        sets.push_back(correlation_relevance(fam, data.train_fraction, j, k));
                    else if (method == "random")
                        sets.push_back(random_relevance(seed + j, fam, j, k));
                    else
                        throw std::runtime_error("unknown relevance method '" + method + "'");
                }
                auto rep = evaluate_with_sets(params, lm.layout, windows, request.context,
                                              request.cycles, sets);
                out << method << ',' << k << ',' << detail::format_double(rep.sparsity) << ','
                    << detail::format_double(rep.mse_mean) << "\n";
                std::cout << "  " << method << ": sparsity "
                          << detail::format_double(rep.sparsity) << " mse "
                          << detail::format_double(rep.mse_mean) << "\n";
            }
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/compare.csv", out.str());
            std::cout << "comparison written to " << out_dir << "/compare.csv\n";
            return 0;
        }

        if (bsw->parsed() || bsl->parsed()) {
            detail::ensure_dir(out_dir);
            std::vector<detail::sweep_row> rows;
            if (bsl->parsed() && !sweep_path.empty()) {
                rows = detail::parse_sweep_csv(sweep_path);
            } else {
                if (checkpoint_path.empty())
                    throw std::runtime_error("bench: needs --checkpoint or --sweep");
                auto fam = data.resolve(seed);
                auto lm = detail::load_for(checkpoint_path, fam);
                auto& params = lm.ckpt.params;
                auto windows = detail::eval_windows_for(fam, lm.ckpt.stats, data.train_fraction,
                                                        request.context, request.cycles,
                                                        params.cfg.patch_len, 0);
                if (windows.size() > eval_windows) windows.resize(eval_windows);
                auto req = request.request(params.n);
                std::vector<double> thresholds;
                if (!thresholds_arg.empty()) {
                    thresholds.push_back(-std::numeric_limits<double>::infinity());
                    for (const auto& t : detail::split(thresholds_arg, ','))
                        thresholds.push_back(std::stod(t));
                } else {
                    thresholds = detail::auto_thresholds(params, req.sensors, points);
                }
                for (double thr : thresholds) {
                    auto point_req = req;
                    point_req.threshold = thr;
                    const auto uni = vsens::detail::request_universe(params, lm.layout, req.sensors,
                                                                     thr);
                    bool seen = false;
                    for (const auto& r : rows) seen = seen || r.universe == uni.size();
                    if (seen) continue;  // same universe, same workload
                    rows.push_back(
                        detail::sweep_point(params, lm.layout, windows, point_req, reps, warmups));
                    const auto& r = rows.back();
                    std::cout << "threshold " << detail::threshold_str(thr) << ": sparsity "
                              << detail::format_double(r.sparsity) << ", tokens " << r.tokens_total
                              << ", median " << detail::format_double(r.median_ms) << " ms, mse "
                              << detail::format_double(r.mse) << "\n";
                }
                detail::write_text(out_dir + "/sweep.csv", detail::sweep_csv(rows));
                std::cout << "sweep written to " << out_dir << "/sweep.csv\n";
            }
            if (bsl->parsed()) {
                std::vector<std::pair<double, double>> measured, analytic;
                std::vector<std::pair<double, double>> by_sparsity;
                for (const auto& r : rows) {
                    measured.emplace_back(r.sparsity, r.measured_flops);
                    analytic.emplace_back(r.sparsity, r.analytic_flops);
                    by_sparsity.emplace_back(r.sparsity, r.median_ms);
                }
                auto fit_m = fit_scaling_slopes(measured);
                auto fit_a = fit_scaling_slopes(analytic);
                std::sort(by_sparsity.begin(), by_sparsity.end());
                bool monotone = true;
                for (std::size_t i = 1; i < by_sparsity.size(); ++i)
                    monotone = monotone && by_sparsity[i].second <= by_sparsity[i - 1].second;
                double min_act = std::numeric_limits<double>::infinity(), max_act = 0.0;
                double min_ms = std::numeric_limits<double>::infinity(), max_ms = 0.0;
                for (const auto& r : rows) {
                    min_act = std::min(min_act, static_cast<double>(r.activation_bytes));
                    max_act = std::max(max_act, static_cast<double>(r.activation_bytes));
                    min_ms = std::min(min_ms, r.median_ms);
                    max_ms = std::max(max_ms, r.median_ms);
                }
                nlohmann::ordered_json report;
                report["points"] = rows.size();
                report["measured"] = {{"dense_slope", fit_m.dense_slope},
                                      {"sparse_slope", fit_m.sparse_slope},
                                      {"boundary_log10", fit_m.boundary},
                                      {"residual", fit_m.residual}};
                report["analytic"] = {{"dense_slope", fit_a.dense_slope},
                                      {"sparse_slope", fit_a.sparse_slope},
                                      {"boundary_log10", fit_a.boundary},
                                      {"residual", fit_a.residual}};
                report["wall_clock_monotone_nonincreasing"] = monotone;
                report["achieved_time_ratio"] = min_ms > 0.0 ? max_ms / min_ms : 0.0;
                report["achieved_memory_ratio"] = min_act > 0.0 ? max_act / min_act : 0.0;
                detail::write_text(out_dir + "/slopes.json", report.dump(2) + "\n");
                detail::write_resolved_config(app, out_dir);
                std::cout << "measured slopes: dense "
                          << detail::format_double(fit_m.dense_slope) << ", sparse "
                          << detail::format_double(fit_m.sparse_slope)
                          << (monotone ? " (wall-clock monotone)" : " (wall-clock NOT monotone)")
                          << "\nslopes written to " << out_dir << "/slopes.json\n";
            }
            return 0;
        }

        if (bsel->parsed()) {
            detail::ensure_dir(out_dir);
            auto fam = data.resolve(seed);
            auto lm = detail::load_for(checkpoint_path, fam);
            auto& params = lm.ckpt.params;
            auto windows = detail::eval_windows_for(fam, lm.ckpt.stats, data.train_fraction,
                                                    request.context, request.cycles,
                                                    params.cfg.patch_len, 0);
            rng pick = rng::stream(seed, "select");
            std::ostringstream out;
            out << "size,mean_sparsity,mean_union,median_ms,activation_bytes\n";
            double ms_single = 0.0, ms_all = 0.0, act_single = 0.0, act_all = 0.0;
            for (std::size_t size = 1; size <= params.n; ++size) {
                double sparsity_sum = 0.0, union_sum = 0.0;
                const std::size_t draws = size == params.n ? 1 : subsets;
                forecast_request timing_req;
                for (std::size_t d = 0; d < draws; ++d) {
                    auto sensors = sample_subset(params.n, size, pick);
                    auto sets = detail::sets_at(params, lm.layout, sensors, request.threshold);
                    const auto uni = union_variates(sets);
                    sparsity_sum += sparsity_of(uni.size(), lm.layout.num_variates());
                    union_sum += static_cast<double>(uni.size());
                    if (d == 0) {
                        timing_req.sensors = sensors;
                        timing_req.context_slots = request.context;
                        timing_req.cycles = request.cycles;
                        timing_req.threshold = request.threshold;
                    }
                }
                auto one = [&] {
                    (void)autoregressive_forecast(params, lm.layout, windows.front(), timing_req);
                };
                const std::uint64_t live0 = live_allocation_bytes();
                reset_peak_allocation();
                one();
                const double act = static_cast<double>(peak_allocation_bytes() - live0);
                auto stats = profile(one, 2, reps);
                const double ms = stats.median_ns / 1e6;
                if (size == 1) {
                    ms_single = ms;
                    act_single = act;
                }
                if (size == params.n) {
                    ms_all = ms;
                    act_all = act;
                }
                out << size << ',' << detail::format_double(sparsity_sum / draws) << ','
                    << detail::format_double(union_sum / draws) << ',' << detail::format_double(ms)
                    << ',' << detail::format_double(act) << "\n";
                std::cout << "size " << size << ": mean sparsity "
                          << detail::format_double(sparsity_sum / draws) << ", median "
                          << detail::format_double(ms) << " ms\n";
            }
            detail::write_resolved_config(app, out_dir);
            detail::write_text(out_dir + "/select.csv", out.str());
            std::cout << "single-sensor vs all-sensors ratios: time "
                      << detail::format_double(ms_single > 0 ? ms_all / ms_single : 0.0)
                      << "x, memory "
                      << detail::format_double(act_single > 0 ? act_all / act_single : 0.0)
                      << "x\nselection sweep written to " << out_dir << "/select.csv\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace vsens::cli
