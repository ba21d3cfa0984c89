#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "css/config.hpp"
#include "css/proto.hpp"
#include "css/rng.hpp"

namespace css {

// B_hat_u: pixels entering the unsupervised CE.
inline std::vector<bool> valid_logit_mask(const std::vector<double>& conf, double delta_u,
                                          const std::vector<bool>& fused_valid) {
    if (conf.size() != fused_valid.size())
        throw std::invalid_argument("valid_logit_mask: size mismatch");
    std::vector<bool> out(conf.size());
    for (std::size_t i = 0; i < conf.size(); ++i)
        out[i] = fused_valid[i] && conf[i] >= delta_u;
    return out;
}

struct AnchorSet {
    std::vector<int> pixels;  // indices into the batch's pixel axis
    int hard_count = 0;       // leading entries came from the hard tier
};

// Anchor selection per class: hard candidates (sim_ind < delta_s) are
// taken first, valid candidates (sim_ind >= delta_w) fill the remainder
// up to anchors_per_class, each tier subsampled uniformly.
inline std::map<int, AnchorSet> select_anchors(const std::vector<double>& sim_ind,
                                               const std::vector<int>& labels,
                                               const std::vector<bool>& valid,
                                               const SamplingConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t n = labels.size();
    if (sim_ind.size() != n || valid.size() != n)
        throw std::invalid_argument("select_anchors: size mismatch");
    std::map<int, std::vector<int>> hard, easy;
    for (std::size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        if (sim_ind[i] < cfg.delta_s)
            hard[labels[i]].push_back(static_cast<int>(i));
        else if (sim_ind[i] >= cfg.delta_w)
            easy[labels[i]].push_back(static_cast<int>(i));
    }
    auto take = [&rng](std::vector<int>& pool, int k, std::vector<int>& out) {
        if (static_cast<int>(pool.size()) <= k) {
            out.insert(out.end(), pool.begin(), pool.end());
            return;
        }
        // partial Fisher-Yates: first k entries are a uniform sample
        for (int i = 0; i < k; ++i) {
            int j = i + static_cast<int>(rng.next_below(pool.size() - static_cast<std::size_t>(i)));
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
            out.push_back(pool[static_cast<std::size_t>(i)]);
        }
    };
    std::map<int, AnchorSet> out;
    std::vector<int> seen;
    for (auto& [c, p] : hard) seen.push_back(c);
    for (auto& [c, p] : easy)
        if (!hard.count(c)) seen.push_back(c);
    std::sort(seen.begin(), seen.end());
    for (int c : seen) {
        AnchorSet set;
        if (auto it = hard.find(c); it != hard.end())
            take(it->second, cfg.anchors_per_class, set.pixels);
        set.hard_count = static_cast<int>(set.pixels.size());
        int room = cfg.anchors_per_class - set.hard_count;
        if (room > 0)
            if (auto it = easy.find(c); it != easy.end()) take(it->second, room, set.pixels);
        if (!set.pixels.empty()) out[c] = std::move(set);
    }
    return out;
}

// Negatives for one anchor class: the negative's class is drawn from
// softmax(prototype-to-prototype similarity / tau_neg) over other
// initialized classes with non-empty pools, then a pixel uniformly from
// that class's pool. Draws are with replacement.
inline std::vector<int> sample_negatives(const PrototypeBank& bank, int anchor_class,
                                         const std::map<int, std::vector<int>>& pools,
                                         const SamplingConfig& cfg, Rng& rng) {
    std::vector<int> classes;
    std::vector<double> weights;
    for (const auto& [c, pool] : pools) {
        if (c == anchor_class || pool.empty() || !bank.is_initialized(c)) continue;
        classes.push_back(c);
        double s = 0.0;
        const double* a = bank.prototype(anchor_class);
        const double* b = bank.prototype(c);
        for (int d = 0; d < bank.dim(); ++d) s += a[d] * b[d];
        weights.push_back(s / cfg.tau_neg);
    }
    if (classes.empty()) return {};
    double mx = *std::max_element(weights.begin(), weights.end());
    double z = 0.0;
    for (double& w : weights) {
        w = std::exp(w - mx);
        z += w;
    }
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(cfg.negatives_per_anchor));
    for (int i = 0; i < cfg.negatives_per_anchor; ++i) {
        double u = rng.next_double() * z;
        std::size_t pick = 0;
        double acc = 0.0;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            acc += weights[c];
            if (u < acc) {
                pick = c;
                break;
            }
            pick = c;  // numerical tail falls into the last bucket
        }
        const auto& pool = pools.at(classes[pick]);
        out.push_back(pool[static_cast<std::size_t>(rng.next_below(pool.size()))]);
    }
    return out;
}

}  // namespace css
