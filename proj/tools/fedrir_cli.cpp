// fedrir: experiment front end for the federated representation-learning
// simulator. Subcommands: run, sweep, compare, dump-features, gradcheck,
// partition-report.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "fedrir/checkpoint.hpp"
#include "fedrir/config.hpp"
#include "fedrir/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedrir;

namespace {

constexpr int kExitConfigError = 2;
constexpr int kExitDataError = 3;
constexpr int kExitNumericError = 4;

std::string precision_from_env() {
    const char* env = std::getenv("FEDRIR_PRECISION");
    if (!env || std::string(env) == "f64") return "f64";
    if (std::string(env) == "f32") return "f32";
    throw ConfigError("FEDRIR_PRECISION must be f32 or f64");
}

struct RunArtifacts {
    std::vector<RoundReport> reports;
    double final_weighted = 0.0;
    double final_uniform = 0.0;
};

template <class S>
RunArtifacts execute_run(const ExperimentConfig& cfg, int jobs,
                         const std::string& out_dir) {
    FederationConfig fc = cfg.to_federation_config();
    fc.jobs = jobs;
    const auto t0 = std::chrono::steady_clock::now();
    Federation<S> fed(fc);
    RunArtifacts art;
    art.reports = fed.run_training();
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!art.reports.empty()) {
        art.final_weighted = art.reports.back().weighted_test_acc;
        art.final_uniform = art.reports.back().uniform_test_acc;
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        fs::create_directories(out_dir + "/checkpoints");
        {
            std::ofstream f(out_dir + "/config.echo");
            f << cfg.echo();
        }
        {
            std::ofstream f(out_dir + "/metrics.csv", std::ios::binary);
            f << metrics_csv(art.reports);
        }
        ParameterSet<S> global = fed.global_fg();
        save_checkpoint(out_dir + "/checkpoints/global.frir", global);
        for (const auto& c : fed.clients()) {
            ParameterSet<S> priv = c.models.fcs;
            priv.merge(c.models.gen);
            priv.merge(c.models.head);
            priv.merge(c.models.idm);
            char name[64];
            std::snprintf(name, sizeof(name), "/checkpoints/client_%04d.frir", c.id);
            save_checkpoint(out_dir + name, priv);
        }
        json summary;
        summary["config"] = cfg.values().empty() ? json::object() : json(cfg.values());
        json echo;
        for (const auto& key : ExperimentConfig::known_keys())
            echo[key] = cfg.get(key, ExperimentConfig::default_of(key));
        summary["effective_config"] = echo;
        summary["precision"] = sizeof(S) == 8 ? "f64" : "f32";
        summary["wall_clock_sec"] = wall;
        json rounds = json::array();
        for (const auto& r : art.reports) {
            rounds.push_back({{"round", r.round},
                              {"participants", r.participants.size()},
                              {"uniform_test_acc", r.uniform_test_acc},
                              {"weighted_test_acc", r.weighted_test_acc},
                              {"uplink_params", r.uplink_params},
                              {"downlink_params", r.downlink_params}});
        }
        summary["rounds"] = rounds;
        summary["final_weighted_test_acc"] = art.final_weighted;
        summary["final_uniform_test_acc"] = art.final_uniform;
        std::ofstream f(out_dir + "/summary.json");
        f << summary.dump(2) << "\n";
    }
    return art;
}

RunArtifacts execute_run_dispatch(const ExperimentConfig& cfg, int jobs,
                                  const std::string& out_dir,
                                  const std::string& precision) {
    if (precision == "f32") return execute_run<float>(cfg, jobs, out_dir);
    return execute_run<double>(cfg, jobs, out_dir);
}

ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides,
                             int64_t seed_override) {
    ExperimentConfig cfg;
    if (!path.empty()) cfg = ExperimentConfig::from_file(path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed_override >= 0)
        cfg.set("federation.seed", std::to_string(seed_override));
    return cfg;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};  // unbiased
}

int cmd_gradcheck(uint64_t seed, int instances, double corrupt) {
    const auto results = run_gradcheck(seed, instances, 1e-5, corrupt);
    bool ok = true;
    for (const auto& r : results) {
        const bool pass = r.max_rel_err < 1e-4;
        ok = ok && pass;
        std::printf("%-12s max_rel_err=%.3e  %s\n", r.loss.c_str(),
                    r.max_rel_err, pass ? "ok" : "FAIL");
    }
    return ok ? 0 : kExitNumericError;
}

void cmd_partition_report(const ExperimentConfig& cfg) {
    FederationConfig fc = cfg.to_federation_config();
    Dataset pool = Federation<double>::build_dataset(fc);
    auto clients = make_clients(pool, fc.partition, fc.seed);
    std::printf("client  total  train  test  histogram\n");
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const auto& c = clients[i];
        std::printf("%6zu  %5d  %5zu  %4zu  [", i, c.total, c.train_y.size(),
                    c.test_y.size());
        for (std::size_t k = 0; k < c.histogram.size(); ++k)
            std::printf("%s%d", k ? " " : "", c.histogram[k]);
        std::printf("]\n");
        if (c.empty_test_warning)
            std::fprintf(stderr, "warning: client %zu has an empty test set\n", i);
    }
}

int cmd_dump_features(const std::string& run_dir, const std::string& out_path) {
    ExperimentConfig cfg = ExperimentConfig::from_file(run_dir + "/config.echo");
    FederationConfig fc = cfg.to_federation_config();
    if (fc.algorithm == Algorithm::kFedAvg)
        throw ConfigError("dump-features requires a fedrir or local run");
    Dataset pool = Federation<double>::build_dataset(fc);
    auto clients = make_clients(pool, fc.partition, fc.seed);

    auto global = load_checkpoint<double>(run_dir + "/checkpoints/global.frir");
    const auto fg_net = nets::global_encoder<double>(fc.dims);
    const auto fcs_net = nets::client_specific_encoder<double>(fc.dims);
    if (global.scalar_count() != count_comm_params(fc.dims, Algorithm::kFedRir))
        throw CheckpointError("global checkpoint manifest does not match config dims");

    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw DataError("cannot open output file: " + out_path);
    out << "client_id,label";
    for (int k = 0; k < fc.dims.k_g; ++k) out << ",fg" << k;
    for (int k = 0; k < fc.dims.k_cs; ++k) out << ",fcs" << k;
    out << "\n";
    for (std::size_t i = 0; i < clients.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "/checkpoints/client_%04zu.frir", i);
        auto priv = load_checkpoint<double>(run_dir + name);
        auto dump_block = [&](const Eigen::MatrixXd& x, const std::vector<int>& y) {
            if (x.rows() == 0) return;
            const Mat<double> fg = fg_net.eval(global, x);
            const Mat<double> fcs = fcs_net.eval(priv, x);
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                out << i << ',' << y[static_cast<std::size_t>(r)];
                for (Eigen::Index k = 0; k < fg.cols(); ++k)
                    out << ',' << ExperimentConfig::format_double(fg(r, k));
                for (Eigen::Index k = 0; k < fcs.cols(); ++k)
                    out << ',' << ExperimentConfig::format_double(fcs(r, k));
                out << '\n';
            }
        };
        dump_block(clients[i].train_x, clients[i].train_y);
        dump_block(clients[i].test_x, clients[i].test_y);
    }
    return 0;
}

int cmd_sweep(const ExperimentConfig& base, const std::string& param,
              const std::vector<std::string>& values, int seeds, int jobs,
              const std::string& out_dir, const std::string& precision) {
    if (!ExperimentConfig::known_keys().count(param))
        throw ConfigError("unknown sweep parameter: " + param);
    fs::create_directories(out_dir);
    const uint64_t base_seed =
        std::stoull(base.get("federation.seed", ExperimentConfig::default_of("federation.seed")));
    std::ofstream rows(out_dir + "/sweep.csv", std::ios::binary);
    rows << "param,value,seed,weighted_test_acc,uniform_test_acc\n";
    std::ofstream summary(out_dir + "/sweep_summary.csv", std::ios::binary);
    summary << "param,value,n,mean_weighted,std_weighted,mean_uniform,std_uniform\n";
    for (const auto& value : values) {
        std::vector<double> weighted, uniform;
        for (int s = 0; s < seeds; ++s) {
            ExperimentConfig cfg = base;
            cfg.set(param, value);
            cfg.set("federation.seed", std::to_string(base_seed + static_cast<uint64_t>(s)));
            const auto art = execute_run_dispatch(cfg, jobs, "", precision);
            weighted.push_back(art.final_weighted);
            uniform.push_back(art.final_uniform);
            rows << param << ',' << value << ',' << base_seed + static_cast<uint64_t>(s)
                 << ',' << ExperimentConfig::format_double(art.final_weighted) << ','
                 << ExperimentConfig::format_double(art.final_uniform) << '\n';
            rows.flush();
        }
        const auto [mw, sw] = mean_std(weighted);
        const auto [mu, su] = mean_std(uniform);
        summary << param << ',' << value << ',' << seeds << ','
                << ExperimentConfig::format_double(mw) << ','
                << ExperimentConfig::format_double(sw) << ','
                << ExperimentConfig::format_double(mu) << ','
                << ExperimentConfig::format_double(su) << '\n';
        summary.flush();
        std::printf("%s=%s  weighted %.4f +/- %.4f\n", param.c_str(),
                    value.c_str(), mw, sw);
    }
    return 0;
}

int cmd_compare(const std::vector<std::string>& config_paths, int seeds,
                int jobs, const std::string& out_dir,
                const std::string& precision) {
    if (config_paths.empty()) throw ConfigError("compare needs at least one --config");
    std::vector<ExperimentConfig> configs;
    for (const auto& p : config_paths) configs.push_back(ExperimentConfig::from_file(p));

    // comparison is only valid on identical data, partition and seed
    auto data_signature = [](const ExperimentConfig& c) {
        std::string sig;
        for (const auto& key : ExperimentConfig::known_keys()) {
            if (key.rfind("data.", 0) == 0 || key.rfind("partition.", 0) == 0 ||
                key == "federation.seed" || key == "federation.clients")
                sig += key + "=" + c.get(key, ExperimentConfig::default_of(key)) + ";";
        }
        return sig;
    };
    for (std::size_t i = 1; i < configs.size(); ++i)
        if (data_signature(configs[i]) != data_signature(configs[0]))
            throw ConfigError("compare: config " + config_paths[i] +
                              " uses a different data/partition/seed spec than " +
                              config_paths[0]);

    fs::create_directories(out_dir);
    std::ofstream table(out_dir + "/compare.csv", std::ios::binary);
    table << "arm,algorithm,ablation,n,mean_weighted,std_weighted,mean_uniform,"
             "std_uniform,comm_params_per_participant\n";
    const uint64_t base_seed = std::stoull(
        configs[0].get("federation.seed", ExperimentConfig::default_of("federation.seed")));
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const std::string alg = configs[i].get("federation.algorithm", "fedrir");
        const std::string abl = configs[i].get("federation.ablation", "none");
        const std::string arm = abl == "none" ? alg : alg + ":" + abl;
        std::vector<double> weighted, uniform;
        for (int s = 0; s < seeds; ++s) {
            ExperimentConfig cfg = configs[i];
            cfg.set("federation.seed", std::to_string(base_seed + static_cast<uint64_t>(s)));
            const auto art = execute_run_dispatch(cfg, jobs, "", precision);
            weighted.push_back(art.final_weighted);
            uniform.push_back(art.final_uniform);
        }
        const auto [mw, sw] = mean_std(weighted);
        const auto [mu, su] = mean_std(uniform);
        const FederationConfig fc = configs[i].to_federation_config();
        const int64_t comm = count_comm_params(fc.dims, fc.algorithm);
        table << arm << ',' << alg << ',' << abl << ',' << seeds << ','
              << ExperimentConfig::format_double(mw) << ','
              << ExperimentConfig::format_double(sw) << ','
              << ExperimentConfig::format_double(mu) << ','
              << ExperimentConfig::format_double(su) << ',' << comm << '\n';
        std::printf("%-16s weighted %.4f +/- %.4f  comm/participant %lld\n",
                    arm.c_str(), mw, sw, static_cast<long long>(comm));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedRIR federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir, param;
    std::vector<std::string> overrides, config_paths, sweep_values_raw;
    int64_t seed_override = -1;
    int jobs = 1;
    int seeds = 3;
    int instances = 20;
    uint64_t gc_seed = 1;
    double gc_corrupt = 0.0;
    std::string run_dir, out_path;

    auto add_common = [&](CLI::App* cmd, bool with_out) {
        cmd->add_option("--config", config_path, "experiment config file");
        cmd->add_option("--set", overrides, "override: section.key=value")
            ->take_all();
        cmd->add_option("--seed", seed_override, "master seed override");
        cmd->add_option("--jobs", jobs, "worker threads for client updates");
        if (with_out)
            cmd->add_option("--out", out_dir, "output directory")->required();
    };

    auto* run = app.add_subcommand("run", "execute one training run");
    add_common(run, true);

    auto* sweep = app.add_subcommand("sweep", "sweep one parameter over values x seeds");
    add_common(sweep, true);
    sweep->add_option("--param", param, "config key to sweep, e.g. train.mask_ratio")
        ->required();
    sweep->add_option("--values", sweep_values_raw, "comma-separated values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--seeds", seeds, "seeds per value");

    auto* compare = app.add_subcommand("compare", "compare algorithm/ablation arms");
    compare->add_option("--config", config_paths, "one config per arm")
        ->required()
        ->take_all();
    compare->add_option("--seeds", seeds, "seeds per arm");
    compare->add_option("--jobs", jobs, "worker threads");
    compare->add_option("--out", out_dir, "output directory")->required();

    auto* dump = app.add_subcommand("dump-features", "export per-sample features as CSV");
    dump->add_option("--run", run_dir, "directory of a finished run")->required();
    dump->add_option("--out", out_path, "output CSV path")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss");
    gradcheck->add_option("--seed", gc_seed, "rng seed");
    gradcheck->add_option("--instances", instances, "random instances per loss");
    gradcheck->add_option("--corrupt", gc_corrupt,
                          "harness sanity fixture: scale gradients by 1+x");

    auto* preport = app.add_subcommand("partition-report", "print per-client class histograms");
    add_common(preport, false);

    CLI11_PARSE(app, argc, argv);

    try {
        const std::string precision = precision_from_env();
        if (run->parsed()) {
            execute_run_dispatch(load_config(config_path, overrides, seed_override),
                                 jobs, out_dir, precision);
            return 0;
        }
        if (sweep->parsed()) {
            return cmd_sweep(load_config(config_path, overrides, seed_override),
                             param, sweep_values_raw, seeds, jobs, out_dir,
                             precision);
        }
        if (compare->parsed())
            return cmd_compare(config_paths, seeds, jobs, out_dir, precision);
        if (dump->parsed()) return cmd_dump_features(run_dir, out_path);
        if (gradcheck->parsed())
            return cmd_gradcheck(gc_seed, instances, gc_corrupt);
        if (preport->parsed()) {
            cmd_partition_report(load_config(config_path, overrides, seed_override));
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumericError;
    } catch (const TensorError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
