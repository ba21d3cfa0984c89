#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "css/config.hpp"
#include "css/data.hpp"
#include "css/losses.hpp"
#include "css/metrics.hpp"
#include "css/model.hpp"
#include "css/proto.hpp"
#include "css/rng.hpp"
#include "css/sampling.hpp"
#include "css/supervision.hpp"
#include "css/tensor.hpp"

namespace css {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MetricsRow {
    int epoch = 0;
    double loss_s = 0.0;
    double loss_u = 0.0;
    double loss_c = 0.0;
    double loss_total = 0.0;
    double lr = 0.0;
    std::optional<double> miou;
};

struct RunState {
    TrainConfig cfg;
    int num_classes = 0;
    int height = 0;
    int width = 0;
    ModelParams student;
    TeacherState teacher;
    PrototypeBank bank{1, 1, 0.99};
    int epoch = 0;
    std::vector<MetricsRow> history;
};

// Which indicator gates a loss, per the indicator-mode dispatch: conf
// gates both / similarity gates both / conf for the logit space and
// similarity for the representation space.
enum class GateInd { kConf, kSim };

inline GateInd logit_space_gate(IndicatorMode m) {
    return m == IndicatorMode::kSmlr ? GateInd::kSim : GateInd::kConf;
}
inline GateInd rep_space_gate(IndicatorMode m) {
    return m == IndicatorMode::kConf ? GateInd::kConf : GateInd::kSim;
}

// The valid threshold follows the indicator (delta_u for confidence,
// delta_w for similarity); delta_s stays the hard threshold.
inline double gate_valid_threshold(GateInd g, const SamplingConfig& s) {
    return g == GateInd::kConf ? s.delta_u : s.delta_w;
}

// Pseudo-labels, indicators, and fused supervision for a block of
// unlabeled pixels, all from teacher outputs.
inline PseudoLabelBundle build_bundle(const std::vector<double>& teacher_logits,
                                      const std::vector<double>& teacher_reps, int count,
                                      int num_classes, const PrototypeBank& bank,
                                      const TrainConfig& cfg) {
    PseudoLabelBundle b;
    auto lp = logit_pseudo_labels(teacher_logits, count, num_classes);
    b.y_lgt = std::move(lp.labels);
    b.conf = std::move(lp.conf);
    auto sims = bank.similarities(teacher_reps, count);
    b.y_rep = rep_pseudo_labels(sims, count, bank);
    b.sim_ind = similarity_indicator(sims, count, b.y_rep, bank, cfg.tau);
    b.raw_sim.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        b.raw_sim[static_cast<std::size_t>(i)] =
            sims[static_cast<std::size_t>(b.y_rep[static_cast<std::size_t>(i)]) * count + i];

    switch (cfg.strategy) {
        case Strategy::kLgtOnly:
            b.y_for_logit = b.y_lgt;
            b.y_for_rep = b.y_lgt;
            b.valid_logit.assign(static_cast<std::size_t>(count), true);
            b.valid_rep.assign(static_cast<std::size_t>(count), true);
            break;
        case Strategy::kRepOnly:
            b.y_for_logit = b.y_rep;
            b.y_for_rep = b.y_rep;
            b.valid_logit.assign(static_cast<std::size_t>(count), true);
            b.valid_rep.assign(static_cast<std::size_t>(count), true);
            break;
        case Strategy::kMix: {
            auto f = fuse_mix(b.y_lgt, b.y_rep);
            b.y_for_logit = f.labels;
            b.y_for_rep = f.labels;
            b.valid_logit = f.valid;
            b.valid_rep = f.valid;
            break;
        }
        case Strategy::kCross: {
            auto f = fuse_cross(b.y_lgt, b.y_rep, b.conf, b.sim_ind, cfg.sampling.delta_u,
                                cfg.sampling.delta_w);
            b.y_for_logit = f.y_for_logit;
            b.y_for_rep = f.y_for_rep;
            // swapped labels carry their source space's gate
            b.valid_logit = f.valid_logit;
            b.valid_rep = f.valid_rep;
            break;
        }
        case Strategy::kSupervisedOnly:
            b.y_for_logit.assign(static_cast<std::size_t>(count), 0);
            b.y_for_rep.assign(static_cast<std::size_t>(count), 0);
            b.valid_logit.assign(static_cast<std::size_t>(count), false);
            b.valid_rep.assign(static_cast<std::size_t>(count), false);
            break;
    }
    return b;
}

namespace detail {

struct EpochStats {
    std::map<int, long> anchors_hard, anchors_valid;
    std::map<int, long> negative_hist;
    double gate_sum = 0.0;
    long gate_count = 0;
};

inline void append_metrics_csv(std::ofstream& f, const MetricsRow& r) {
    char buf[64];
    f << r.epoch;
    for (double v : {r.loss_s, r.loss_u, r.loss_c, r.loss_total, r.lr}) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        f << "," << buf;
    }
    if (r.miou) {
        std::snprintf(buf, sizeof buf, "%.17g", *r.miou);
        f << "," << buf;
    } else {
        f << ",";
    }
    f << "\n";
}

}  // namespace detail

inline std::vector<int> predict_labels(ModelParams& params, const std::vector<double>& image,
                                       int H, int W) {
    auto out = forward(nullptr, params, image, H, W);
    const int C = params.num_classes;
    std::vector<int> pred(static_cast<std::size_t>(H) * W);
    for (int i = 0; i < H * W; ++i) {
        const double* row = out.logits.data() + static_cast<long>(i) * C;
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (row[c] > row[best]) best = c;
        pred[static_cast<std::size_t>(i)] = best;
    }
    return pred;
}

// mIoU of the student over the unlabeled set's held-out ground truth
// (falls back to the labeled set when there is nothing unlabeled).
inline double evaluate_miou(RunState& st, const DatasetSplit& split) {
    ConfusionMatrix cm(st.num_classes);
    if (split.unlabeled_count() > 0) {
        for (int i = 0; i < split.unlabeled_count(); ++i) {
            auto pred = predict_labels(st.student, split.unlabeled_image(i), st.height, st.width);
            const auto& gt = split.unlabeled_ground_truth_for_eval(i);
            for (std::size_t p = 0; p < pred.size(); ++p) cm.add(gt[p], pred[p]);
        }
    } else {
        for (const auto& s : split.labeled) {
            auto pred = predict_labels(st.student, s.image, st.height, st.width);
            for (std::size_t p = 0; p < pred.size(); ++p) cm.add(s.label[p], pred[p]);
        }
    }
    return miou_from_confusion(cm).miou;
}

// `epochs_completed` (default: the state's epoch counter) is where a
// resumed run picks up.
inline void save_run_checkpoint(const std::filesystem::path& path, RunState& st,
                                int epochs_completed = -1) {
    if (epochs_completed < 0) epochs_completed = st.epoch;
    std::vector<std::pair<std::string, Tensor>> entries;
    entries.emplace_back("meta",
                         Tensor({5}, {static_cast<double>(st.num_classes),
                                      static_cast<double>(st.height), static_cast<double>(st.width),
                                      static_cast<double>(st.cfg.encoder_width),
                                      static_cast<double>(st.cfg.rep_dim)}));
    entries.emplace_back("epoch", Tensor::scalar(epochs_completed));
    for (auto& [n, t] : st.student.tensors()) entries.emplace_back("student." + n, *t);
    for (auto& [n, t] : st.teacher.params.tensors()) entries.emplace_back("teacher." + n, *t);
    entries.emplace_back("proto.rows", st.bank.rows_tensor());
    entries.emplace_back("proto.flags", st.bank.flags_tensor());
    entries.emplace_back("proto.iter", st.bank.iter_tensor());
    save_checkpoint(path, entries);
}

inline RunState load_run_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
    auto entries = load_checkpoint(path);
    std::map<std::string, Tensor> m;
    for (auto& [n, t] : entries) m.emplace(n, t);
    if (!m.count("meta")) throw DataError("checkpoint missing meta record");
    const Tensor& meta = m.at("meta");
    RunState st;
    st.cfg = cfg;
    st.num_classes = static_cast<int>(meta.data()[0]);
    st.height = static_cast<int>(meta.data()[1]);
    st.width = static_cast<int>(meta.data()[2]);
    const int width = static_cast<int>(meta.data()[3]);
    const int rep_dim = static_cast<int>(meta.data()[4]);
    if (width != cfg.encoder_width || rep_dim != cfg.rep_dim)
        throw DataError("checkpoint/config shape mismatch");
    st.epoch = static_cast<int>(m.at("epoch").item());
    Rng dummy(0);
    st.student = ModelParams::init(st.num_classes, width, rep_dim, dummy);
    for (auto& [n, t] : st.student.tensors()) {
        auto it = m.find("student." + n);
        if (it == m.end() || it->second.shape != t->shape)
            throw DataError("checkpoint/config shape mismatch: " + n);
        *t = it->second;
        t->node = -1;
    }
    st.teacher = TeacherState::from_student(st.student, cfg.teacher_momentum);
    for (auto& [n, t] : st.teacher.params.tensors()) {
        auto it = m.find("teacher." + n);
        if (it == m.end() || it->second.shape != t->shape)
            throw DataError("checkpoint/config shape mismatch: " + n);
        *t = it->second;
        t->node = -1;
    }
    st.bank = PrototypeBank(st.num_classes, rep_dim, cfg.proto_alpha);
    st.bank.restore(m.at("proto.rows"), m.at("proto.flags"), m.at("proto.iter"));
    return st;
}

// One full training run. Deterministic in cfg and split; writes the run
// directory (config echo, metrics, checkpoints, dumps) when out_dir is
// non-empty.
inline RunState train(const TrainConfig& cfg, const DatasetSplit& split, int num_classes,
                      const std::filesystem::path& out_dir = {},
                      const std::filesystem::path& resume_from = {}) {
    cfg.validate();
    if (split.labeled.empty()) throw ConfigError("train: labeled set is empty");
    const int H = split.labeled[0].height, W = split.labeled[0].width;
    const int HW = H * W;
    const int C = num_classes;

    RunState st;
    if (!resume_from.empty()) {
        st = load_run_checkpoint(resume_from, cfg);
        if (st.num_classes != C || st.height != H || st.width != W)
            throw DataError("checkpoint does not match dataset geometry");
    } else {
        Rng init_rng(substream_seed(cfg.seed, "init"));
        st.cfg = cfg;
        st.num_classes = C;
        st.height = H;
        st.width = W;
        st.student = ModelParams::init(C, cfg.encoder_width, cfg.rep_dim, init_rng);
        st.teacher = TeacherState::from_student(st.student, cfg.teacher_momentum);
        st.bank = PrototypeBank(C, cfg.rep_dim, cfg.proto_alpha);
        st.epoch = 0;
    }
    st.cfg = cfg;

    std::ofstream metrics_csv, stats_csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::filesystem::create_directories(out_dir / "checkpoints");
        std::ofstream cfgf(out_dir / "config.txt");
        auto kv = cfg.to_kv();
        kv.set("num_classes", static_cast<long>(C));
        cfgf << kv.serialize();
        metrics_csv.open(out_dir / "metrics.csv");
        metrics_csv << "epoch,loss_s,loss_u,loss_c,loss_total,lr,miou\n";
        stats_csv.open(out_dir / "sampling_stats.csv");
        stats_csv << "epoch,class_id,anchors_hard,anchors_valid,mean_gate,negatives\n";
    }

    const int nl = static_cast<int>(split.labeled.size());
    const int nu = split.unlabeled_count();
    const int steps_per_epoch =
        nu > 0 ? (nu + cfg.batch_size_unlabeled - 1) / cfg.batch_size_unlabeled
               : std::max(1, (nl + cfg.batch_size_labeled - 1) / cfg.batch_size_labeled);

    const GateInd lgate = logit_space_gate(cfg.indicator_mode);
    const GateInd rgate = rep_space_gate(cfg.indicator_mode);

    for (; st.epoch < cfg.total_epochs; ++st.epoch) {
        const bool warm = st.epoch < cfg.warmup_epochs || cfg.strategy == Strategy::kSupervisedOnly;
        Rng rng(substream_seed(substream_seed(cfg.seed, "train"),
                               "epoch_" + std::to_string(st.epoch)));

        // per-epoch shuffled unlabeled order
        std::vector<int> uorder(static_cast<std::size_t>(nu));
        for (int i = 0; i < nu; ++i) uorder[static_cast<std::size_t>(i)] = i;
        for (int i = nu - 1; i > 0; --i) {
            int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
            std::swap(uorder[static_cast<std::size_t>(i)], uorder[static_cast<std::size_t>(j)]);
        }

        MetricsRow row;
        row.epoch = st.epoch;
        detail::EpochStats stats;

        for (int step = 0; step < steps_per_epoch; ++step) {
            const double frac = st.epoch + static_cast<double>(step) / steps_per_epoch;
            const double lr = poly_lr(cfg.lr_base, frac, cfg.total_epochs);

            // labeled batch: uniform draws; unlabeled: shuffled chunk
            std::vector<SegSample> lbatch;
            for (int i = 0; i < cfg.batch_size_labeled; ++i) {
                const auto& s = split.labeled[rng.next_below(static_cast<std::uint64_t>(nl))];
                lbatch.push_back(augment(s, rng.next_u64()));
            }
            std::vector<SegSample> ubatch;  // label member unused
            if (nu > 0 && !warm) {
                for (int i = 0; i < cfg.batch_size_unlabeled; ++i) {
                    int idx = uorder[static_cast<std::size_t>(
                        (step * cfg.batch_size_unlabeled + i) % nu)];
                    SegSample s;
                    s.image = split.unlabeled_image(idx);
                    s.label.assign(static_cast<std::size_t>(HW), 0);
                    s.height = H;
                    s.width = W;
                    s.id = split.unlabeled_id(idx);
                    ubatch.push_back(augment(s, rng.next_u64()));
                }
            }

            const int Nl = static_cast<int>(lbatch.size()) * HW;
            const int Nu = static_cast<int>(ubatch.size()) * HW;

            // ---- teacher forward (no tape) ----
            std::vector<double> t_logits_l, t_reps_l, t_logits_u, t_reps_u;
            auto run_teacher = [&](const std::vector<SegSample>& batch, std::vector<double>& lo,
                                   std::vector<double>& re) {
                for (const auto& s : batch) {
                    auto o = forward(nullptr, st.teacher.params, s.image, H, W);
                    lo.insert(lo.end(), o.logits.data(), o.logits.data() + o.logits.size());
                    re.insert(re.end(), o.reps.data(), o.reps.data() + o.reps.size());
                }
            };
            run_teacher(lbatch, t_logits_l, t_reps_l);
            run_teacher(ubatch, t_logits_u, t_reps_u);

            std::vector<int> gt_l;
            gt_l.reserve(static_cast<std::size_t>(Nl));
            for (const auto& s : lbatch)
                for (auto v : s.label) gt_l.push_back(v);

            PseudoLabelBundle bundle;
            if (!warm && Nu > 0) bundle = build_bundle(t_logits_u, t_reps_u, Nu, C, st.bank, cfg);

            // ---- student forward (on tape) ----
            Tape tape;
            for (auto* t : st.student.tensor_ptrs()) tape.watch(*t);
            std::vector<Tensor> s_logits_parts, s_reps_parts;
            for (const auto& s : lbatch) {
                auto o = forward(&tape, st.student, s.image, H, W);
                s_logits_parts.push_back(o.logits);
                s_reps_parts.push_back(o.reps);
            }
            Tensor s_logits_l = concat_rows(&tape, s_logits_parts);
            std::vector<Tensor> u_logits_parts, u_reps_parts;
            for (const auto& s : ubatch) {
                auto o = forward(&tape, st.student, s.image, H, W);
                u_logits_parts.push_back(o.logits);
                u_reps_parts.push_back(o.reps);
            }

            long px_s = 0, px_u = 0, n_anchors = 0;
            Tensor l_s = supervised_loss(&tape, s_logits_l, gt_l, &px_s);
            Tensor l_u = Tensor::scalar(0.0);
            Tensor l_c = Tensor::scalar(0.0);

            if (!warm && Nu > 0) {
                const auto& lconf = bundle.conf;
                const auto& lsim = bundle.sim_ind;
                const std::vector<double>& lgate_vals = lgate == GateInd::kConf ? lconf : lsim;
                const double lthr = gate_valid_threshold(lgate, cfg.sampling);
                auto u_mask = valid_logit_mask(lgate_vals, lthr, bundle.valid_logit);
                Tensor s_logits_u = concat_rows(&tape, u_logits_parts);
                l_u = unsupervised_loss(&tape, s_logits_u, bundle.y_for_logit, u_mask, &px_u);

                if (cfg.lambda_c > 0.0 && st.bank.initialized_count() > 1) {
                    // labeled-pixel indicators for anchor gating
                    auto sims_l = st.bank.similarities(t_reps_l, Nl);
                    std::vector<double> conf_l(static_cast<std::size_t>(Nl));
                    {
                        auto lp = logit_pseudo_labels(t_logits_l, Nl, C);
                        conf_l = lp.conf;
                    }
                    std::vector<double> sim_l(static_cast<std::size_t>(Nl), 0.0);
                    std::vector<bool> lvalid(static_cast<std::size_t>(Nl), true);
                    for (int i = 0; i < Nl; ++i) {
                        int c = gt_l[static_cast<std::size_t>(i)];
                        if (!st.bank.is_initialized(c)) lvalid[static_cast<std::size_t>(i)] = false;
                    }
                    {
                        // assigned class = ground truth; skip pixels of
                        // uninitialized classes
                        std::vector<int> assigned = gt_l;
                        std::vector<double> tmp_sim(static_cast<std::size_t>(Nl), 0.0);
                        for (int i = 0; i < Nl; ++i) {
                            if (!lvalid[static_cast<std::size_t>(i)]) continue;
                            int c = assigned[static_cast<std::size_t>(i)];
                            double mx = -1e300, z = 0.0;
                            for (int cc = 0; cc < C; ++cc) {
                                if (!st.bank.is_initialized(cc)) continue;
                                mx = std::max(mx,
                                              sims_l[static_cast<std::size_t>(cc) * Nl + i] / cfg.tau);
                            }
                            for (int cc = 0; cc < C; ++cc) {
                                if (!st.bank.is_initialized(cc)) continue;
                                z += std::exp(sims_l[static_cast<std::size_t>(cc) * Nl + i] / cfg.tau -
                                              mx);
                            }
                            tmp_sim[static_cast<std::size_t>(i)] =
                                std::exp(sims_l[static_cast<std::size_t>(c) * Nl + i] / cfg.tau - mx) /
                                z;
                        }
                        sim_l = std::move(tmp_sim);
                    }

                    // combined pixel arrays: labeled block first
                    std::vector<int> all_labels = gt_l;
                    all_labels.insert(all_labels.end(), bundle.y_for_rep.begin(),
                                      bundle.y_for_rep.end());
                    std::vector<bool> all_valid = lvalid;
                    for (int i = 0; i < Nu; ++i) {
                        bool v = bundle.valid_rep[static_cast<std::size_t>(i)] &&
                                 st.bank.is_initialized(bundle.y_for_rep[static_cast<std::size_t>(i)]);
                        all_valid.push_back(v);
                    }
                    const std::vector<double>& ugate_vals =
                        rgate == GateInd::kConf ? bundle.conf : bundle.sim_ind;
                    std::vector<double> all_gate = rgate == GateInd::kConf ? conf_l : sim_l;
                    all_gate.insert(all_gate.end(), ugate_vals.begin(), ugate_vals.end());

                    SamplingConfig scfg = cfg.sampling;
                    scfg.delta_w = gate_valid_threshold(rgate, cfg.sampling);
                    if (scfg.delta_s > scfg.delta_w) scfg.delta_s = scfg.delta_w;

                    auto anchors = select_anchors(all_gate, all_labels, all_valid, scfg, rng);

                    // negative pools: any pixel with a trusted label (ground
                    // truth or fused agreement); no indicator tier, so the
                    // push term is live from the first post-warm-up step
                    std::map<int, std::vector<int>> pools;
                    for (std::size_t i = 0; i < all_labels.size(); ++i)
                        if (all_valid[i]) pools[all_labels[i]].push_back(static_cast<int>(i));

                    std::map<int, std::vector<int>> anchor_px, neg_px;
                    for (auto& [c, set] : anchors) {
                        anchor_px[c] = set.pixels;
                        neg_px[c] = sample_negatives(st.bank, c, pools, scfg, rng);
                        stats.anchors_hard[c] += set.hard_count;
                        stats.anchors_valid[c] +=
                            static_cast<long>(set.pixels.size()) - set.hard_count;
                        for (int p : set.pixels) stats.gate_sum += all_gate[static_cast<std::size_t>(p)];
                        stats.gate_count += static_cast<long>(set.pixels.size());
                        for (int p : neg_px[c]) ++stats.negative_hist[all_labels[static_cast<std::size_t>(p)]];
                    }

                    std::vector<Tensor> rep_parts = s_reps_parts;
                    rep_parts.insert(rep_parts.end(), u_reps_parts.begin(), u_reps_parts.end());
                    Tensor all_reps = concat_rows(&tape, rep_parts);
                    l_c = contrastive_loss(&tape, all_reps, anchor_px, neg_px, st.bank, cfg.tau,
                                           &n_anchors);
                }
            }

            Tensor total = total_loss(&tape, l_s, l_u, l_c, cfg.lambda_c);
            if (!std::isfinite(total.item()))
                throw NumericalError("non-finite loss at epoch " + std::to_string(st.epoch) +
                                     " step " + std::to_string(step));

            if (total.node >= 0) {
                tape.backward(total);
                sgd_step(st.student.tensor_ptrs(), tape, lr);
            }
            st.teacher.ema_update(st.student);

            // ---- prototype maintenance from teacher representations ----
            {
                std::vector<double> reps = t_reps_l;
                std::vector<int> classes = gt_l;
                std::vector<bool> valid(static_cast<std::size_t>(Nl), true);
                if (!warm && Nu > 0) {
                    reps.insert(reps.end(), t_reps_u.begin(), t_reps_u.end());
                    classes.insert(classes.end(), bundle.y_for_rep.begin(), bundle.y_for_rep.end());
                    for (int i = 0; i < Nu; ++i)
                        valid.push_back(bundle.valid_rep[static_cast<std::size_t>(i)] &&
                                        bundle.sim_ind[static_cast<std::size_t>(i)] >=
                                            cfg.sampling.delta_w);
                }
                st.bank.ema_update(
                    PrototypeBank::batch_centroids(reps, cfg.rep_dim, classes, valid));
            }

            row.loss_s += l_s.item();
            row.loss_u += l_u.item();
            row.loss_c += l_c.item();
            row.loss_total += total.item();
            row.lr = lr;
        }

        row.loss_s /= steps_per_epoch;
        row.loss_u /= steps_per_epoch;
        row.loss_c /= steps_per_epoch;
        row.loss_total /= steps_per_epoch;

        const bool last = st.epoch == cfg.total_epochs - 1;
        if ((st.epoch + 1) % cfg.eval_every == 0 || last) row.miou = evaluate_miou(st, split);
        st.history.push_back(row);

        if (metrics_csv.is_open()) detail::append_metrics_csv(metrics_csv, row);
        if (stats_csv.is_open()) {
            char buf[64];
            for (int c = 0; c < C; ++c) {
                long h = stats.anchors_hard.count(c) ? stats.anchors_hard[c] : 0;
                long v = stats.anchors_valid.count(c) ? stats.anchors_valid[c] : 0;
                long ng = stats.negative_hist.count(c) ? stats.negative_hist[c] : 0;
                if (h == 0 && v == 0 && ng == 0) continue;
                double mean_gate = stats.gate_count ? stats.gate_sum / stats.gate_count : 0.0;
                std::snprintf(buf, sizeof buf, "%.17g", mean_gate);
                stats_csv << st.epoch << "," << c << "," << h << "," << v << "," << buf << ","
                          << ng << "\n";
            }
        }
        if (!out_dir.empty() && (row.miou || last))
            save_run_checkpoint(
                out_dir / "checkpoints" / ("epoch_" + std::to_string(st.epoch) + ".bin"), st,
                st.epoch + 1);
    }

    // final debug dump of the supervision maps for the first unlabeled image
    if (!out_dir.empty() && split.unlabeled_count() > 0 && st.bank.initialized_count() > 0 &&
        st.cfg.strategy != Strategy::kSupervisedOnly) {
        auto o = forward(nullptr, st.teacher.params, split.unlabeled_image(0), H, W);
        std::vector<double> lo(o.logits.data(), o.logits.data() + o.logits.size());
        std::vector<double> re(o.reps.data(), o.reps.data() + o.reps.size());
        auto b = build_bundle(lo, re, HW, C, st.bank, st.cfg);
        dump_bundle(out_dir / "dumps", "unlabeled_0", b, H, W);
    }
    return st;
}

// ---- ablation harness ----

struct AblateRun {
    Strategy strategy;
    IndicatorMode indicator;
    std::uint64_t seed;
};

struct AblateResult {
    std::vector<std::tuple<AblateRun, double, int>> rows;  // run, final miou, exit code
};

inline AblateResult ablate(const TrainConfig& base_cfg, const std::vector<AblateRun>& grid,
                           const DatasetSplit& split, int num_classes,
                           const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    AblateResult result;
    for (const auto& run : grid) {
        TrainConfig cfg = base_cfg;
        cfg.strategy = run.strategy;
        cfg.indicator_mode = run.indicator;
        cfg.seed = run.seed;
        std::string name = std::string(strategy_name(run.strategy)) + "_" +
                           indicator_mode_name(run.indicator) + "_s" + std::to_string(run.seed);
        double final_miou = 0.0;
        int code = 0;
        try {
            RunState st = train(cfg, split, num_classes, out_dir / name);
            for (auto it = st.history.rbegin(); it != st.history.rend(); ++it)
                if (it->miou) {
                    final_miou = *it->miou;
                    break;
                }
        } catch (const NumericalError&) {
            code = 4;
        } catch (const std::exception&) {
            code = 3;
        }
        result.rows.emplace_back(run, final_miou, code);
    }

    // baseline = lgt_only + conf mean over seeds
    double base_sum = 0.0;
    int base_n = 0;
    for (const auto& [run, m, code] : result.rows)
        if (code == 0 && run.strategy == Strategy::kLgtOnly && run.indicator == IndicatorMode::kConf) {
            base_sum += m;
            ++base_n;
        }
    const bool have_base = base_n > 0;
    const double base_mean = have_base ? base_sum / base_n : 0.0;

    std::ofstream f(out_dir / "summary.csv");
    f << "strategy,indicator,seed,final_miou,delta_vs_baseline,exit_code\n";
    char buf[64];
    for (const auto& [run, m, code] : result.rows) {
        std::snprintf(buf, sizeof buf, "%.17g", m);
        f << strategy_name(run.strategy) << "," << indicator_mode_name(run.indicator) << ","
          << run.seed << "," << buf << ",";
        if (have_base && code == 0) {
            std::snprintf(buf, sizeof buf, "%.17g", m - base_mean);
            f << buf;
        }
        f << "," << code << "\n";
    }
    // per-config aggregate rows
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const auto& [run, m, code] : result.rows)
        if (code == 0)
            groups[{strategy_name(run.strategy), indicator_mode_name(run.indicator)}].push_back(m);
    std::ofstream agg(out_dir / "aggregate.csv");
    agg << "strategy,indicator,runs,mean_miou,std_miou\n";
    for (const auto& [key, vals] : groups) {
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        double sd = vals.size() > 1 ? std::sqrt(var / (static_cast<double>(vals.size()) - 1)) : 0.0;
        std::snprintf(buf, sizeof buf, "%.17g", mean);
        agg << key.first << "," << key.second << "," << vals.size() << "," << buf << ",";
        std::snprintf(buf, sizeof buf, "%.17g", sd);
        agg << buf << "\n";
    }
    return result;
}

}  // namespace css
