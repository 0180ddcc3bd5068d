#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mixedsim/crossbar.hpp"
#include "mixedsim/csv.hpp"
#include "mixedsim/fit.hpp"
#include "mixedsim/models.hpp"
#include "mixedsim/network.hpp"
#include "mixedsim/noise.hpp"
#include "mixedsim/serialize.hpp"
#include "mixedsim/thermal.hpp"

namespace mixedsim {

inline constexpr const char* kToolVersion = "1.0.0";

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline void require_keys(const json& j, const std::string& path,
                         const std::vector<std::string>& allowed,
                         const std::vector<std::string>& required) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError(path + ": unknown key '" + it.key() + "'");
    }
    for (const auto& k : required)
        if (!j.contains(k)) throw ConfigError(path + ": missing required key '" + k + "'");
}

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + tmp.string());
        f << content;
    }
    std::filesystem::rename(tmp, path);
}

inline int worker_count() {
    if (const char* env = std::getenv("MIXEDSIM_WORKERS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// Order-stable fan-out: each index's result only depends on the index.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const int workers = std::min<int>(worker_count(), static_cast<int>(count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errs[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace detail

struct RunResult {
    int exit_code = 0;
    std::string message;
    std::vector<std::string> outputs;
};

namespace detail {

struct ExpContext {
    json cfg;
    std::filesystem::path out_dir;
    std::uint64_t seed_offset = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::pair<std::string, std::string>> files;  // name -> content

    void emit(const std::string& name, const std::string& content) {
        files.emplace_back(name, content);
    }
};

inline std::vector<std::uint64_t> read_seeds(const json& j, std::uint64_t offset) {
    std::vector<std::uint64_t> seeds;
    if (j.contains("seeds")) {
        for (const auto& s : j.at("seeds")) seeds.push_back(s.get<std::uint64_t>() + offset);
    } else if (j.contains("seed")) {
        seeds.push_back(j.at("seed").get<std::uint64_t>() + offset);
    } else {
        seeds.push_back(offset);
    }
    return seeds;
}

// --- handlers ---------------------------------------------------------

inline void run_retention(ExpContext& ctx) {
    require_keys(ctx.cfg, "config",
                 {"kind", "version", "t_elapsed_h", "t_bake_c", "t_target_c",
                  "activation_energy_ev"},
                 {"kind", "t_elapsed_h", "t_bake_c", "t_target_c"});
    RetentionProjector proj;
    proj.activation_energy_ev = ctx.cfg.value("activation_energy_ev", 1.1);
    const double te = ctx.cfg.at("t_elapsed_h").get<double>();
    const double tb = ctx.cfg.at("t_bake_c").get<double>();
    const double tt = ctx.cfg.at("t_target_c").get<double>();
    const double h = project_retention(te, tb, tt, proj);
    std::string csv = "t_elapsed_h,t_bake_c,t_target_c,activation_energy_ev,projected_h,projected_years\n";
    csv += fmt(te) + "," + fmt(tb) + "," + fmt(tt) + "," + fmt(proj.activation_energy_ev) + "," +
           fmt(h) + "," + fmt(h / (24.0 * 365.25)) + "\n";
    ctx.emit("retention.csv", csv);
}

inline FitShape shape_from_string(const std::string& s) {
    if (s == "temp_memristor") return FitShape::TempMemristor;
    if (s == "temp_eflash") return FitShape::TempEflash;
    if (s == "nl_memristor") return FitShape::NlMemristor;
    if (s == "nl_eflash") return FitShape::NlEflash;
    if (s == "switch_set") return FitShape::SwitchSet;
    if (s == "switch_reset") return FitShape::SwitchReset;
    throw ConfigError("unknown fit shape '" + s + "'");
}

inline void run_fit(ExpContext& ctx) {
    require_keys(ctx.cfg, "config", {"kind", "version", "shape", "csv", "init", "x_tune", "t0"},
                 {"kind", "shape", "csv", "init"});
    const FitShape shape = shape_from_string(ctx.cfg.at("shape").get<std::string>());
    MeasurementTable table = ingest_measurements(ctx.cfg.at("csv").get<std::string>());
    const std::vector<double> init = ctx.cfg.at("init").get<std::vector<double>>();
    FitContext fctx;
    fctx.x_tune = ctx.cfg.value("x_tune", 0.6);
    fctx.t0 = ctx.cfg.value("t0", 25.0);
    const FitResult res = fit_model(table, shape, init, fctx);
    json out;
    out["shape"] = ctx.cfg.at("shape");
    out["coefficients"] = res.coeff;
    out["metadata"] = {{"rmse", res.rmse},
                       {"r2", res.r_squared},
                       {"converged", res.converged},
                       {"iterations", res.iterations},
                       {"tool_version", kToolVersion}};
    ctx.emit("fit.json", out.dump(2) + "\n");
}

inline void run_tune(ExpContext& ctx) {
    require_keys(ctx.cfg, "config",
                 {"kind", "version", "rows", "cols", "sigma_alpha", "approach", "rounds",
                  "v_step", "target_rel_error", "tail_threshold", "seeds", "seed"},
                 {"kind", "rows", "cols", "sigma_alpha", "approach"});
    const int rows = ctx.cfg.at("rows").get<int>();
    const int cols = ctx.cfg.at("cols").get<int>();
    const double sa = ctx.cfg.at("sigma_alpha").get<double>();
    TuningConfig tcfg;
    tcfg.approach = approach_from_string(ctx.cfg.at("approach").get<std::string>());
    tcfg.rounds = ctx.cfg.value("rounds", 10);
    tcfg.v_step = ctx.cfg.value("v_step", 0.1);
    tcfg.target_rel_error = ctx.cfg.value("target_rel_error", 0.01);
    if (tcfg.rounds != 10 && tcfg.approach != TuneApproach::Naive)
        throw ConfigError("cap schedules are defined for 10 rounds");
    const double tail_thr = ctx.cfg.value("tail_threshold", 0.05);
    const auto& models = default_memristor_models();

    struct SeedOut {
        std::string device_csv;
        std::string summary_row;
    };
    std::vector<SeedOut> outs(ctx.seeds.size());
    parallel_for(ctx.seeds.size(), [&](std::size_t i) {
        const std::uint64_t seed = ctx.seeds[i];
        CrossbarState s = init_crossbar(rows, cols, sa, seed);
        std::vector<double> targets = pseudo_image_targets(rows, cols, seed + 1000);
        TuneReport rep = tune_crossbar(s, targets, tcfg, models);
        ErrorStats st = tuning_error_stats(s, targets, tail_thr);
        std::string dev = "target,final,rel_error\n";
        for (std::size_t d = 0; d < targets.size(); ++d)
            dev += fmt(targets[d]) + "," + fmt(s.g[d]) + "," + fmt(rep.rel_error[d]) + "\n";
        outs[i].device_csv = dev;
        outs[i].summary_row = std::to_string(seed) + "," + fmt(st.mean) + "," + fmt(st.stddev) +
                              "," + fmt(st.p50) + "," + fmt(st.p90) + "," +
                              fmt(st.tail_fraction) + "," + std::to_string(rep.disturbance_events) +
                              "\n";
    });
    std::string summary = "seed,mean,std,p50,p90,tail_fraction,disturbances\n";
    for (std::size_t i = 0; i < outs.size(); ++i) {
        summary += outs[i].summary_row;
        ctx.emit("tune_seed" + std::to_string(ctx.seeds[i]) + ".csv", outs[i].device_csv);
    }
    ctx.emit("tune_summary.csv", summary);
}

struct NetBundle {
    Network net;
    DatasetSplits data;
    std::vector<AnalogLayer> analog;
};

inline NetBundle build_trained_network(const json& netcfg, Technology tech, MapScheme scheme) {
    require_keys(netcfg, "network",
                 {"seed", "epochs", "n_train", "n_val", "n_test", "batch_size", "lr"}, {"seed"});
    const std::uint64_t seed = netcfg.at("seed").get<std::uint64_t>();
    NetBundle b;
    b.data = make_blob_splits(seed, netcfg.value("n_train", 2000), netcfg.value("n_val", 500),
                              netcfg.value("n_test", 500));
    b.net = make_mini_convnet(seed);
    TrainConfig tc;
    tc.epochs = netcfg.value("epochs", 15);
    tc.batch_size = netcfg.value("batch_size", 32);
    tc.lr = netcfg.value("lr", 1e-3);
    tc.seed = seed;
    train(b.net, b.data.train, b.data.val, tc);
    b.analog = prepare_analog(b.net, tech, scheme, b.data.train);
    return b;
}

inline Technology cfg_technology(const json& cfg) {
    return technology_from_string(cfg.value("technology", std::string("memristor")));
}
inline MapScheme cfg_scheme(const json& cfg) {
    return scheme_from_string(cfg.value("scheme", std::string("map1")));
}

inline void run_faults(ExpContext& ctx) {
    require_keys(ctx.cfg, "config",
                 {"kind", "version", "ppm", "mix", "compensation", "seeds", "seed", "technology",
                  "scheme", "network"},
                 {"kind", "ppm", "compensation", "network"});
    double fh = 1.0 / 3.0, fl = 1.0 / 3.0, fr = 1.0 / 3.0;
    if (ctx.cfg.contains("mix")) {
        require_keys(ctx.cfg.at("mix"), "config.mix", {"high", "low", "random"},
                     {"high", "low", "random"});
        fh = ctx.cfg.at("mix").at("high").get<double>();
        fl = ctx.cfg.at("mix").at("low").get<double>();
        fr = ctx.cfg.at("mix").at("random").get<double>();
    }
    const std::string comp = ctx.cfg.at("compensation").get<std::string>();
    FaultCompensation fc;
    if (comp == "none")
        fc = FaultCompensation::None;
    else if (comp == "retune")
        fc = FaultCompensation::Retune;
    else if (comp == "retune_column")
        fc = FaultCompensation::RetuneColumn;
    else
        throw ConfigError("unknown compensation '" + comp + "'");

    NetBundle b = build_trained_network(ctx.cfg.at("network"), cfg_technology(ctx.cfg),
                                        cfg_scheme(ctx.cfg));
    std::vector<double> ppms = ctx.cfg.at("ppm").get<std::vector<double>>();
    struct Row {
        std::string text;
    };
    std::vector<Row> rows(ppms.size() * ctx.seeds.size());
    parallel_for(rows.size(), [&](std::size_t i) {
        const double ppm = ppms[i / ctx.seeds.size()];
        const std::uint64_t seed = ctx.seeds[i % ctx.seeds.size()];
        ImperfectionStack st;
        st.faults = FaultSpec{ppm, fh, fl, fr, seed, fc};
        std::size_t uncomp = 0;
        const double acc =
            evaluate_with_stack(b.net, b.analog, st, b.data.test, b.data.train, &uncomp);
        const double clean = accuracy(b.net, b.data.test);
        rows[i].text = fmt(ppm) + "," + std::to_string(seed) + "," +
                       fmt((clean - acc) * 100.0) + "," + std::to_string(uncomp) + "\n";
    });
    std::string csv = "ppm,seed,accuracy_drop_pp,uncompensatable\n";
    for (const auto& r : rows) csv += r.text;
    ctx.emit("faults.csv", csv);
}

inline void run_noise(ExpContext& ctx) {
    require_keys(ctx.cfg, "config",
                 {"kind", "version", "rho", "seeds", "seed", "technology", "scheme", "network"},
                 {"kind", "rho", "network"});
    NetBundle b = build_trained_network(ctx.cfg.at("network"), cfg_technology(ctx.cfg),
                                        cfg_scheme(ctx.cfg));
    std::vector<double> rhos = ctx.cfg.at("rho").get<std::vector<double>>();
    std::vector<std::string> rows(rhos.size() * ctx.seeds.size());
    parallel_for(rows.size(), [&](std::size_t i) {
        const double rho = rhos[i / ctx.seeds.size()];
        const std::uint64_t seed = ctx.seeds[i % ctx.seeds.size()];
        std::vector<AnalogLayer> analog = b.analog;
        for (auto& al : analog) al.noise.rho = rho;
        ImperfectionStack st;
        st.noise_seed = seed;
        const double acc = evaluate_with_stack(b.net, analog, st, b.data.test, b.data.train);
        const double clean = accuracy(b.net, b.data.test);
        rows[i] = fmt(rho) + "," + std::to_string(seed) + "," + fmt((clean - acc) * 100.0) + "\n";
    });
    std::string csv = "rho,seed,accuracy_drop_pp\n";
    for (const auto& r : rows) csv += r;
    ctx.emit("noise.csv", csv);
}

inline void run_thermal(ExpContext& ctx) {
    require_keys(ctx.cfg, "config",
                 {"kind", "version", "approach", "k", "temps", "seeds", "seed", "technology",
                  "scheme", "network"},
                 {"kind", "approach", "network"});
    const std::string approach = ctx.cfg.at("approach").get<std::string>();
    if (approach != "baseline" && approach != "1" && approach != "1+2" && approach != "1+2+3")
        throw ConfigError("unknown thermal approach '" + approach + "'");
    const int k = ctx.cfg.value("k", 4);
    std::vector<double> temps =
        ctx.cfg.value("temps", std::vector<double>{25, 50, 75, 100});
    const Technology tech = cfg_technology(ctx.cfg);
    const MapScheme scheme = cfg_scheme(ctx.cfg);

    const json& netcfg = ctx.cfg.at("network");
    require_keys(netcfg, "network",
                 {"seed", "epochs", "n_train", "n_val", "n_test", "batch_size", "lr"}, {"seed"});
    std::string csv = "temp_c,seed,accuracy_drop_pp\n";
    for (std::uint64_t seed : ctx.seeds) {
        DatasetSplits data = make_blob_splits(seed, netcfg.value("n_train", 2000),
                                              netcfg.value("n_val", 500),
                                              netcfg.value("n_test", 500));
        Network net = make_mini_convnet(seed);
        TrainConfig tc;
        tc.epochs = netcfg.value("epochs", 15);
        tc.batch_size = netcfg.value("batch_size", 32);
        tc.lr = netcfg.value("lr", 1e-3);
        tc.seed = seed;
        std::vector<AnalogLayer> analog = prepare_analog(net, tech, scheme, data.train);
        if (approach == "baseline") {
            train(net, data.train, data.val, tc);
        } else {
            train_with_temp_sweep(net, data.train, data.val, tc, analog);
        }
        analog = prepare_analog(net, tech, scheme, data.train);
        BnBank bank;
        if (approach == "1+2" || approach == "1+2+3")
            bank = calibrate_bn_bank(net, data.train, data.val, analog, uniform_references(k),
                                     seed);
        const double clean = accuracy(net, data.test);
        for (double t : temps) {
            Network eval_net = net;
            if (!bank.reference_temps.empty()) apply_bn_bank(eval_net, bank, t);
            ImperfectionStack st;
            st.temperature = t;
            const double acc =
                evaluate_with_stack(eval_net, analog, st, data.test, data.train);
            csv += fmt(t) + "," + std::to_string(seed) + "," + fmt((clean - acc) * 100.0) + "\n";
        }
    }
    ctx.emit("thermal.csv", csv);
}

inline void run_train(ExpContext& ctx) {
    require_keys(ctx.cfg, "config", {"kind", "version", "network", "technology", "scheme"},
                 {"kind", "network"});
    NetBundle b = build_trained_network(ctx.cfg.at("network"), cfg_technology(ctx.cfg),
                                        cfg_scheme(ctx.cfg));
    const double test_acc = accuracy(b.net, b.data.test);
    json out = network_to_json(b.net);
    ctx.emit("network.json", out.dump() + "\n");
    std::string csv = "split,accuracy\n";
    csv += "val," + fmt(accuracy(b.net, b.data.val)) + "\n";
    csv += "test," + fmt(test_acc) + "\n";
    ctx.emit("train_summary.csv", csv);
}

}  // namespace detail

inline RunResult run_experiment(const std::string& config_path, std::uint64_t seed_offset = 0,
                                const std::string& out_override = "",
                                const std::string& expected_kind = "") {
    RunResult res;
    detail::ExpContext ctx;
    std::string raw;
    try {
        std::ifstream f(config_path);
        if (!f) throw ConfigError("cannot open config " + config_path);
        std::stringstream ss;
        ss << f.rdbuf();
        raw = ss.str();
        ctx.cfg = json::parse(raw);
        if (!ctx.cfg.is_object()) throw ConfigError("config root must be an object");
        if (!ctx.cfg.contains("kind")) throw ConfigError("config: missing required key 'kind'");
        if (ctx.cfg.contains("version") && ctx.cfg.at("version").get<int>() != 1)
            throw ConfigError("config: unsupported version");
        ctx.seed_offset = seed_offset;
        ctx.seeds = detail::read_seeds(ctx.cfg, seed_offset);
        ctx.out_dir = out_override.empty() ? std::filesystem::path(".")
                                           : std::filesystem::path(out_override);

        const auto t0 = std::chrono::steady_clock::now();
        const std::string kind = ctx.cfg.at("kind").get<std::string>();
        if (!expected_kind.empty() && kind != expected_kind)
            throw ConfigError("config kind '" + kind + "' does not match subcommand '" +
                              expected_kind + "'");
        if (kind == "retention")
            detail::run_retention(ctx);
        else if (kind == "fit")
            detail::run_fit(ctx);
        else if (kind == "tune")
            detail::run_tune(ctx);
        else if (kind == "faults")
            detail::run_faults(ctx);
        else if (kind == "noise")
            detail::run_noise(ctx);
        else if (kind == "thermal")
            detail::run_thermal(ctx);
        else if (kind == "train")
            detail::run_train(ctx);
        else
            throw ConfigError("unknown experiment kind '" + kind + "'");

        std::filesystem::create_directories(ctx.out_dir);
        for (const auto& [name, content] : ctx.files) {
            detail::atomic_write(ctx.out_dir / name, content);
            res.outputs.push_back(name);
        }
        const auto t1 = std::chrono::steady_clock::now();
        json manifest;
        char hash_hex[32];
        std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                      static_cast<unsigned long long>(detail::fnv1a(raw)));
        manifest["config_hash"] = std::string(hash_hex);
        manifest["tool_version"] = kToolVersion;
        manifest["seeds"] = ctx.seeds;
        manifest["wall_clock_ms"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
        manifest["outputs"] = res.outputs;
        manifest["status"] = "ok";
        detail::atomic_write(ctx.out_dir / "manifest.json", manifest.dump(2) + "\n");
    } catch (const ConfigError& e) {
        res.exit_code = 2;
        res.message = e.what();
    } catch (const json::exception& e) {
        res.exit_code = 2;
        res.message = e.what();
    } catch (const std::exception& e) {
        // remove partial outputs, record the failure
        for (const auto& name : res.outputs) {
            std::error_code ec;
            std::filesystem::remove(ctx.out_dir / name, ec);
        }
        res.outputs.clear();
        res.exit_code = 3;
        res.message = e.what();
        json manifest;
        manifest["status"] = "failed";
        manifest["error"] = res.message;
        std::error_code ec;
        std::filesystem::create_directories(ctx.out_dir, ec);
        if (!ec) detail::atomic_write(ctx.out_dir / "manifest.json", manifest.dump(2) + "\n");
    }
    return res;
}

}  // namespace mixedsim
