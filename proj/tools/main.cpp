// css: synthetic-data generation, semi-supervised training, ablation
// grids, and checkpoint evaluation behind one command-line tool.

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "css/config.hpp"
#include "css/data.hpp"
#include "css/metrics.hpp"
#include "css/model.hpp"
#include "css/trainer.hpp"

namespace fs = std::filesystem;
using namespace css;

namespace {

constexpr const char* kEngineVersion = "1.0.0";

enum LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

int log_level() {
    const char* v = std::getenv("CSS_LOG");
    if (!v || std::string(v) == "info") return kInfo;
    std::string s(v);
    if (s == "quiet") return kQuiet;
    if (s == "debug") return kDebug;
    throw ConfigError("CSS_LOG must be one of quiet, info, debug (got `" + s + "`)");
}

void log_info(const std::string& msg) {
    if (log_level() >= kInfo) std::cerr << "[css] " << msg << "\n";
}
void log_debug(const std::string& msg) {
    if (log_level() >= kDebug) std::cerr << "[css:debug] " << msg << "\n";
}

// Crash-forensics record: written before heavy work starts, rewritten
// with the wall-clock duration on success.
void write_manifest(const fs::path& dir, const std::string& command, const KvConfig& resolved,
                    const std::vector<std::string>& artifacts, double duration_seconds) {
    fs::create_directories(dir);
    std::ofstream f(dir / "run_manifest.txt");
    if (!f) throw DataError("cannot write run manifest in " + dir.string());
    f << "command = " << command << "\n";
    f << "engine_version = " << kEngineVersion << "\n";
    if (duration_seconds >= 0.0) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3f", duration_seconds);
        f << "duration_seconds = " << buf << "\n";
    }
    for (std::size_t i = 0; i < artifacts.size(); ++i)
        f << "artifact." << i << " = " << artifacts[i] << "\n";
    for (const auto& [k, v] : resolved.items()) f << "config." << k << " = " << v << "\n";
}

KvConfig load_kv(const std::string& path, std::optional<long> seed_override) {
    KvConfig kv = KvConfig::parse_file(path);
    if (seed_override) kv.set("seed", *seed_override);
    return kv;
}

int infer_num_classes(const KvConfig& kv, const DatasetSplit& sp) {
    if (kv.has("num_classes")) return static_cast<int>(kv.get_int("num_classes"));
    int mx = 0;
    for (const auto& s : sp.labeled)
        for (auto v : s.label) mx = std::max(mx, static_cast<int>(v));
    return mx + 1;
}

double final_miou_from_metrics(const fs::path& metrics_csv) {
    std::ifstream f(metrics_csv);
    if (!f) throw DataError("cannot read " + metrics_csv.string());
    std::string line, last;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        auto pos = line.rfind(',');
        if (pos != std::string::npos && pos + 1 < line.size()) last = line.substr(pos + 1);
    }
    if (last.empty()) throw DataError("no evaluated epoch in " + metrics_csv.string());
    return std::stod(last);
}

// ---- generate ----

int cmd_generate(const std::string& config_path, const std::string& out,
                 std::optional<long> seed_override) {
    KvConfig kv = load_kv(config_path, seed_override);
    DataConfig dc = DataConfig::from_kv(kv);
    const int labeled_count = static_cast<int>(kv.get_int("labeled_count", 4));
    KvConfig resolved = dc.to_kv();
    resolved.set("labeled_count", static_cast<long>(labeled_count));
    write_manifest(out, "generate", resolved, {}, -1.0);

    auto t0 = std::chrono::steady_clock::now();
    log_info("generating " + std::to_string(dc.count) + " samples");
    auto samples = generate(dc);
    DatasetSplit sp = split(samples, labeled_count, dc.seed);
    export_dataset(out, sp);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "generate", resolved, {(fs::path(out) / "manifest.txt").string()}, dt);
    log_info("wrote dataset to " + out);
    return 0;
}

// ---- train ----

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              std::optional<long> seed_override, bool resume) {
    KvConfig kv = load_kv(config_path, seed_override);
    TrainConfig cfg = TrainConfig::from_kv(kv);
    DatasetSplit sp = import_dataset(data_dir);
    const int C = infer_num_classes(kv, sp);

    KvConfig resolved = cfg.to_kv();
    resolved.set("num_classes", static_cast<long>(C));
    write_manifest(out, "train", resolved, {}, -1.0);

    fs::path resume_from;
    if (resume) {
        fs::path best;
        int best_epoch = -1;
        fs::path ckpt_dir = fs::path(out) / "checkpoints";
        if (fs::is_directory(ckpt_dir))
            for (const auto& e : fs::directory_iterator(ckpt_dir)) {
                std::string name = e.path().filename().string();
                int ep;
                if (std::sscanf(name.c_str(), "epoch_%d.bin", &ep) == 1 && ep > best_epoch) {
                    best_epoch = ep;
                    best = e.path();
                }
            }
        if (best_epoch < 0) throw DataError("--resume: no checkpoint found under " + out);
        resume_from = best;
        log_info("resuming from " + best.string());
    }

    auto t0 = std::chrono::steady_clock::now();
    log_debug("resolved config:\n" + resolved.serialize());
    RunState st = train(cfg, sp, C, out, resume_from);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::vector<std::string> artifacts{(fs::path(out) / "metrics.csv").string(),
                                       (fs::path(out) / "sampling_stats.csv").string()};
    write_manifest(out, "train", resolved, artifacts, dt);
    if (!st.history.empty() && st.history.back().miou)
        log_info("final miou " + std::to_string(*st.history.back().miou));
    return 0;
}

// ---- ablate ----

std::vector<AblateRun> parse_grid(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open grid file: " + path);
    std::vector<AblateRun> grid;
    std::set<std::tuple<std::string, std::string, long>> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto h = line.find('#');
        if (h != std::string::npos) line = line.substr(0, h);
        for (char& c : line)
            if (c == ',') c = ' ';
        std::istringstream ss(line);
        std::string strat, ind;
        long seed;
        if (!(ss >> strat)) continue;  // blank line
        if (!(ss >> ind >> seed))
            throw ConfigError("grid line " + std::to_string(lineno) +
                              ": expected `strategy indicator seed`");
        if (!seen.insert({strat, ind, seed}).second)
            throw ConfigError("grid line " + std::to_string(lineno) + ": duplicate triple");
        grid.push_back({parse_strategy(strat), parse_indicator_mode(ind),
                        static_cast<std::uint64_t>(seed)});
    }
    if (grid.empty()) throw ConfigError("grid file lists no runs: " + path);
    return grid;
}

std::string run_dir_name(const AblateRun& r) {
    return std::string(strategy_name(r.strategy)) + "_" + indicator_mode_name(r.indicator) + "_s" +
           std::to_string(r.seed);
}

// Multi-process fan-out: each worker trains its slice of the grid and
// leaves an `exit_code` file per run dir; the parent assembles the
// summary from the run directories.
int cmd_ablate(const std::string& config_path, const std::string& grid_path,
               const std::string& data_dir, const std::string& out,
               std::optional<long> seed_override, int jobs) {
    KvConfig kv = load_kv(config_path, seed_override);
    TrainConfig base_cfg = TrainConfig::from_kv(kv);
    std::vector<AblateRun> grid = parse_grid(grid_path);
    DatasetSplit sp = import_dataset(data_dir);
    const int C = infer_num_classes(kv, sp);

    KvConfig resolved = base_cfg.to_kv();
    resolved.set("num_classes", static_cast<long>(C));
    resolved.set("grid_runs", static_cast<long>(grid.size()));
    resolved.set("jobs", static_cast<long>(jobs));
    write_manifest(out, "ablate", resolved, {}, -1.0);
    auto t0 = std::chrono::steady_clock::now();

    auto run_one = [&](const AblateRun& r) {
        TrainConfig cfg = base_cfg;
        cfg.strategy = r.strategy;
        cfg.indicator_mode = r.indicator;
        cfg.seed = r.seed;
        fs::path dir = fs::path(out) / run_dir_name(r);
        int code = 0;
        try {
            train(cfg, sp, C, dir);
        } catch (const NumericalError& e) {
            code = 4;
            log_info(run_dir_name(r) + " failed: " + e.what());
        } catch (const std::exception& e) {
            code = 3;
            log_info(run_dir_name(r) + " failed: " + e.what());
        }
        std::ofstream(dir / "exit_code") << code << "\n";
    };

    if (jobs <= 1) {
        for (const auto& r : grid) {
            log_info("ablate run " + run_dir_name(r));
            run_one(r);
        }
    } else {
        std::vector<pid_t> children;
        for (int w = 0; w < jobs; ++w) {
            pid_t pid = fork();
            if (pid < 0) throw DataError("fork failed");
            if (pid == 0) {
                for (std::size_t i = static_cast<std::size_t>(w); i < grid.size();
                     i += static_cast<std::size_t>(jobs))
                    run_one(grid[i]);
                _exit(0);
            }
            children.push_back(pid);
        }
        for (pid_t pid : children) {
            int status = 0;
            waitpid(pid, &status, 0);
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
                throw DataError("ablate worker crashed");
        }
    }

    // assemble summary from the run directories
    struct Row {
        AblateRun run;
        double miou = 0.0;
        int code = 0;
    };
    std::vector<Row> rows;
    for (const auto& r : grid) {
        fs::path dir = fs::path(out) / run_dir_name(r);
        Row row{r, 0.0, 3};
        std::ifstream ec(dir / "exit_code");
        if (ec) ec >> row.code;
        if (row.code == 0) {
            try {
                row.miou = final_miou_from_metrics(dir / "metrics.csv");
            } catch (const std::exception&) {
                row.code = 3;
            }
        }
        rows.push_back(row);
    }

    double base_sum = 0.0;
    int base_n = 0;
    for (const auto& r : rows)
        if (r.code == 0 && r.run.strategy == Strategy::kLgtOnly &&
            r.run.indicator == IndicatorMode::kConf) {
            base_sum += r.miou;
            ++base_n;
        }
    const double base_mean = base_n ? base_sum / base_n : 0.0;

    std::ofstream f(fs::path(out) / "summary.csv");
    f << "strategy,indicator,seed,final_miou,delta_vs_baseline,exit_code\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g", r.miou);
        f << strategy_name(r.run.strategy) << "," << indicator_mode_name(r.run.indicator) << ","
          << r.run.seed << "," << buf << ",";
        if (base_n && r.code == 0) {
            std::snprintf(buf, sizeof buf, "%.17g", r.miou - base_mean);
            f << buf;
        }
        f << "," << r.code << "\n";
    }
    f.close();

    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "ablate", resolved, {(fs::path(out) / "summary.csv").string()}, dt);
    for (const auto& r : rows)
        if (r.code != 0) return r.code;  // partial failure propagates
    return 0;
}

// ---- eval ----

int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
             const std::string& data_dir, const std::string& out,
             std::optional<long> seed_override) {
    TrainConfig cfg;
    KvConfig kv;
    if (!config_path.empty()) {
        kv = load_kv(config_path, seed_override);
        cfg = TrainConfig::from_kv(kv);
    } else {
        // derive the architecture from the checkpoint's own metadata
        auto entries = load_checkpoint(ckpt_path);
        for (auto& [n, t] : entries)
            if (n == "meta") {
                cfg.encoder_width = static_cast<int>(t.data()[3]);
                cfg.rep_dim = static_cast<int>(t.data()[4]);
            }
    }
    RunState st = load_run_checkpoint(ckpt_path, cfg);
    DatasetSplit sp = import_dataset(data_dir);
    const int C = st.num_classes;
    const int H = st.height, W = st.width;

    KvConfig resolved = cfg.to_kv();
    resolved.set("num_classes", static_cast<long>(C));
    resolved.set("checkpoint", ckpt_path);
    write_manifest(out, "eval", resolved, {}, -1.0);
    auto t0 = std::chrono::steady_clock::now();

    // student mIoU, labeled and unlabeled sets separately
    std::vector<SourceQuality> miou_rows;
    {
        ConfusionMatrix cm(C);
        for (const auto& s : sp.labeled) {
            if (s.height != H || s.width != W)
                throw DataError("checkpoint/dataset shape mismatch");
            auto pred = predict_labels(st.student, s.image, H, W);
            for (std::size_t p = 0; p < pred.size(); ++p) cm.add(s.label[p], pred[p]);
        }
        miou_rows.push_back({"student_labeled", miou_from_confusion(cm), cm.total()});
    }
    if (sp.unlabeled_count() > 0) {
        ConfusionMatrix cm(C);
        for (int i = 0; i < sp.unlabeled_count(); ++i) {
            auto pred = predict_labels(st.student, sp.unlabeled_image(i), H, W);
            const auto& gt = sp.unlabeled_ground_truth_for_eval(i);
            for (std::size_t p = 0; p < pred.size(); ++p) cm.add(gt[p], pred[p]);
        }
        miou_rows.push_back({"student_unlabeled", miou_from_confusion(cm), cm.total()});
    }
    write_per_class_iou_csv(fs::path(out) / "miou.csv", miou_rows);

    // teacher pseudo-label quality + indicator diagnostics on the
    // unlabeled set, against its held-out ground truth
    if (sp.unlabeled_count() > 0 && st.bank.initialized_count() > 0) {
        std::vector<int> y_lgt_all, y_rep_all, y_mix_all, gt_int;
        std::vector<bool> m_lgt, m_rep, m_mix;
        std::vector<std::uint8_t> gt_all;
        std::vector<double> conf_all, cos_all;
        std::vector<int> cos_labels;
        for (int i = 0; i < sp.unlabeled_count(); ++i) {
            auto o = forward(nullptr, st.teacher.params, sp.unlabeled_image(i), H, W);
            std::vector<double> lo(o.logits.data(), o.logits.data() + o.logits.size());
            std::vector<double> re(o.reps.data(), o.reps.data() + o.reps.size());
            auto b = build_bundle(lo, re, H * W, C, st.bank, st.cfg);
            const auto& gt = sp.unlabeled_ground_truth_for_eval(i);
            gt_all.insert(gt_all.end(), gt.begin(), gt.end());
            y_lgt_all.insert(y_lgt_all.end(), b.y_lgt.begin(), b.y_lgt.end());
            y_rep_all.insert(y_rep_all.end(), b.y_rep.begin(), b.y_rep.end());
            auto fused = fuse_mix(b.y_lgt, b.y_rep);
            y_mix_all.insert(y_mix_all.end(), fused.labels.begin(), fused.labels.end());
            for (int p = 0; p < H * W; ++p) {
                std::size_t q = static_cast<std::size_t>(p);
                m_lgt.push_back(b.conf[q] >= st.cfg.sampling.delta_u);
                m_rep.push_back(b.sim_ind[q] >= st.cfg.sampling.delta_w);
                m_mix.push_back(fused.valid[q] && b.conf[q] >= st.cfg.sampling.delta_u);
                // (confidence, cosine-to-own-prototype) pairs for classes
                // that have a prototype
                int g = gt[q];
                if (st.bank.is_initialized(g)) {
                    double cs = 0.0;
                    const double* proto = st.bank.prototype(g);
                    for (int d = 0; d < st.bank.dim(); ++d)
                        cs += proto[d] * re[q * static_cast<std::size_t>(st.bank.dim()) +
                                            static_cast<std::size_t>(d)];
                    conf_all.push_back(b.conf[q]);
                    cos_all.push_back(cs);
                    cos_labels.push_back(g);
                }
            }
        }
        std::vector<SourceQuality> pq{
            pseudo_label_quality("lgt", y_lgt_all, m_lgt, gt_all, C),
            pseudo_label_quality("rep", y_rep_all, m_rep, gt_all, C),
            pseudo_label_quality("mix", y_mix_all, m_mix, gt_all, C)};
        write_per_class_iou_csv(fs::path(out) / "pseudo_quality.csv", pq);
        write_indicator_csvs(out, conf_all, cos_all, cos_labels, C);
    }

    // color-mapped prediction overlays
    const int overlay_limit = 16;
    int written = 0;
    auto write_overlay = [&](const std::vector<double>& image, int id) {
        auto pred = predict_labels(st.student, image, H, W);
        std::vector<double> overlay(image.size());
        for (int p = 0; p < H * W; ++p) {
            std::size_t q = static_cast<std::size_t>(p);
            if (pred[q] == 0) {
                for (int ch = 0; ch < 3; ++ch) overlay[q * 3 + ch] = image[q * 3 + ch];
            } else {
                auto col = detail::class_color(pred[q]);
                for (int ch = 0; ch < 3; ++ch)
                    overlay[q * 3 + ch] = 0.5 * image[q * 3 + ch] + 0.5 * col[static_cast<std::size_t>(ch)];
            }
        }
        char name[48];
        std::snprintf(name, sizeof name, "overlay_%06d.ppm", id);
        write_ppm(fs::path(out) / name, overlay, H, W);
    };
    for (int i = 0; i < sp.unlabeled_count() && written < overlay_limit; ++i, ++written)
        write_overlay(sp.unlabeled_image(i), sp.unlabeled_id(i));
    for (const auto& s : sp.labeled) {
        if (written >= overlay_limit) break;
        write_overlay(s.image, s.id);
        ++written;
    }

    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "eval", resolved, {(fs::path(out) / "miou.csv").string()}, dt);
    log_info("eval wrote " + out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collaborative-space semi-supervised segmentation toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, grid_path;
    std::optional<long> seed_override;
    bool resume = false;
    int jobs = 1;

    auto* gen = app.add_subcommand("generate", "synthesize a shape dataset");
    gen->add_option("--config", config_path, "data config file")->required();
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_option("--seed", seed_override, "seed override");

    auto* tr = app.add_subcommand("train", "train on a generated dataset");
    tr->add_option("--config", config_path, "train config file")->required();
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--out", out_dir, "run directory")->required();
    tr->add_option("--seed", seed_override, "seed override");
    tr->add_flag("--resume", resume, "continue from the latest checkpoint in --out");

    auto* ab = app.add_subcommand("ablate", "run a strategy/indicator/seed grid");
    ab->add_option("--config", config_path, "base train config file")->required();
    ab->add_option("--grid", grid_path, "grid file: `strategy indicator seed` per line")
        ->required();
    ab->add_option("--data", data_dir, "dataset directory")->required();
    ab->add_option("--out", out_dir, "ablation output directory")->required();
    ab->add_option("--seed", seed_override, "seed override for the base config");
    ab->add_option("--jobs", jobs, "worker processes")->check(CLI::PositiveNumber);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    ev->add_option("--config", config_path, "train config file (optional)");
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--out", out_dir, "evaluation output directory")->required();
    ev->add_option("--seed", seed_override, "seed override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        log_level();  // validate CSS_LOG up front
        if (gen->parsed()) return cmd_generate(config_path, out_dir, seed_override);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out_dir, seed_override, resume);
        if (ab->parsed())
            return cmd_ablate(config_path, grid_path, data_dir, out_dir, seed_override, jobs);
        if (ev->parsed()) return cmd_eval(ckpt_path, config_path, data_dir, out_dir, seed_override);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
