#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "css/config.hpp"
#include "css/data.hpp"
#include "css/proto.hpp"

namespace css {

// Per-pixel pseudo-labels and reliability indicators from both spaces,
// plus the fused supervision per space.
struct PseudoLabelBundle {
    std::vector<int> y_lgt;        // logit-space argmax labels
    std::vector<double> conf;      // max softmax probability
    std::vector<int> y_rep;        // nearest-prototype labels
    std::vector<double> sim_ind;   // softmax-of-cosine indicator
    std::vector<double> raw_sim;   // cosine to the assigned class prototype

    std::vector<int> y_for_logit;  // supervision for L_u
    std::vector<bool> valid_logit;
    std::vector<int> y_for_rep;    // supervision for contrastive anchors
    std::vector<bool> valid_rep;
};

struct LogitPseudo {
    std::vector<int> labels;
    std::vector<double> conf;
};

// Argmax labels + max softmax probability from teacher logits
// [N x C]. Ties break toward the lowest class id.
inline LogitPseudo logit_pseudo_labels(const std::vector<double>& logits, int count, int classes) {
    if (logits.size() != static_cast<std::size_t>(count) * classes)
        throw std::invalid_argument("logit_pseudo_labels: size mismatch");
    LogitPseudo out;
    out.labels.resize(static_cast<std::size_t>(count));
    out.conf.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        double z = 0.0;
        for (int c = 0; c < classes; ++c) z += std::exp(row[c] - row[best]);
        out.labels[static_cast<std::size_t>(i)] = best;
        out.conf[static_cast<std::size_t>(i)] = 1.0 / z;
    }
    return out;
}

// Nearest prototype over initialized classes (cosine argmax, ties to
// the lowest class id). `sims` is bank.similarities(): [C x N].
inline std::vector<int> rep_pseudo_labels(const std::vector<double>& sims, int count,
                                          const PrototypeBank& bank) {
    if (bank.initialized_count() == 0)
        throw std::logic_error("rep_pseudo_labels: no initialized prototypes");
    std::vector<int> labels(static_cast<std::size_t>(count), -1);
    for (int i = 0; i < count; ++i) {
        int best = -1;
        double best_sim = 0.0;
        for (int c = 0; c < bank.num_classes(); ++c) {
            if (!bank.is_initialized(c)) continue;
            double s = sims[static_cast<std::size_t>(c) * count + i];
            if (best < 0 || s > best_sim) {
                best = c;
                best_sim = s;
            }
        }
        labels[static_cast<std::size_t>(i)] = best;
    }
    return labels;
}

// Softmax-of-cosine indicator: the assigned class's share of the
// temperature-scaled similarity distribution over initialized classes.
inline std::vector<double> similarity_indicator(const std::vector<double>& sims, int count,
                                                const std::vector<int>& assigned,
                                                const PrototypeBank& bank, double tau) {
    if (tau <= 0.0) throw ConfigError("similarity_indicator: tau must be positive");
    if (assigned.size() != static_cast<std::size_t>(count))
        throw std::invalid_argument("similarity_indicator: size mismatch");
    std::vector<double> out(static_cast<std::size_t>(count), 0.0);
    for (int i = 0; i < count; ++i) {
        double mx = -1e300;
        for (int c = 0; c < bank.num_classes(); ++c) {
            if (!bank.is_initialized(c)) continue;
            mx = std::max(mx, sims[static_cast<std::size_t>(c) * count + i] / tau);
        }
        double z = 0.0;
        for (int c = 0; c < bank.num_classes(); ++c) {
            if (!bank.is_initialized(c)) continue;
            z += std::exp(sims[static_cast<std::size_t>(c) * count + i] / tau - mx);
        }
        const int a = assigned[static_cast<std::size_t>(i)];
        if (a < 0 || !bank.is_initialized(a))
            throw std::logic_error("similarity_indicator: assigned class has no prototype");
        out[static_cast<std::size_t>(i)] =
            std::exp(sims[static_cast<std::size_t>(a) * count + i] / tau - mx) / z;
    }
    return out;
}

struct FusedMix {
    std::vector<int> labels;
    std::vector<bool> valid;
};

// Mix strategy: keep only pixels where both spaces agree.
inline FusedMix fuse_mix(const std::vector<int>& y_lgt, const std::vector<int>& y_rep) {
    if (y_lgt.size() != y_rep.size()) throw std::invalid_argument("fuse_mix: size mismatch");
    FusedMix out;
    out.labels.resize(y_lgt.size(), 0);
    out.valid.resize(y_lgt.size(), false);
    for (std::size_t i = 0; i < y_lgt.size(); ++i) {
        out.valid[i] = (y_lgt[i] == y_rep[i]);
        if (out.valid[i]) out.labels[i] = y_lgt[i];
    }
    return out;
}

struct FusedCross {
    std::vector<int> y_for_logit;   // rep-space labels
    std::vector<bool> valid_logit;  // gated by sim_ind >= delta_w
    std::vector<int> y_for_rep;     // logit-space labels
    std::vector<bool> valid_rep;    // gated by conf >= delta_u
};

// Cross strategy: each space is supervised by the other space's labels,
// gated by the label source's own indicator.
inline FusedCross fuse_cross(const std::vector<int>& y_lgt, const std::vector<int>& y_rep,
                             const std::vector<double>& conf, const std::vector<double>& sim_ind,
                             double delta_u, double delta_w) {
    const std::size_t n = y_lgt.size();
    if (y_rep.size() != n || conf.size() != n || sim_ind.size() != n)
        throw std::invalid_argument("fuse_cross: size mismatch");
    FusedCross out;
    out.y_for_logit = y_rep;
    out.y_for_rep = y_lgt;
    out.valid_logit.resize(n);
    out.valid_rep.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.valid_logit[i] = sim_ind[i] >= delta_w;
        out.valid_rep[i] = conf[i] >= delta_u;
    }
    return out;
}

// Debug dump (one PGM per map + binary masks).
inline void dump_bundle(const std::filesystem::path& dir, const std::string& stem,
                        const PseudoLabelBundle& b, int H, int W) {
    std::filesystem::create_directories(dir);
    auto to_u8 = [](const std::vector<int>& v) {
        std::vector<std::uint8_t> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::uint8_t>(v[i]);
        return out;
    };
    auto mask_u8 = [](const std::vector<bool>& v) {
        std::vector<std::uint8_t> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] ? 255 : 0;
        return out;
    };
    write_pgm(dir / (stem + "_y_lgt.pgm"), to_u8(b.y_lgt), H, W);
    write_pgm(dir / (stem + "_y_rep.pgm"), to_u8(b.y_rep), H, W);
    write_pgm(dir / (stem + "_y_fused.pgm"), to_u8(b.y_for_logit), H, W);
    write_pgm(dir / (stem + "_valid_logit.pgm"), mask_u8(b.valid_logit), H, W);
    write_pgm(dir / (stem + "_valid_rep.pgm"), mask_u8(b.valid_rep), H, W);
}

}  // namespace css
