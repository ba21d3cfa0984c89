#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "css/config.hpp"
#include "css/proto.hpp"
#include "css/sampling.hpp"
#include "css/tensor.hpp"

namespace css {

struct LossReport {
    double supervised = 0.0;
    double unsupervised = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    long supervised_pixels = 0;
    long unsupervised_pixels = 0;
    long anchor_count = 0;
};

// Mean cross-entropy over masked pixels of a [N x C] logit matrix.
// Empty mask yields a constant zero (no gradient).
inline Tensor masked_cross_entropy(Tape* tape, const Tensor& logits,
                                   const std::vector<int>& labels, const std::vector<bool>& mask,
                                   long* pixels_out = nullptr) {
    const int n = logits.shape[0], c = logits.shape[1];
    if (static_cast<int>(labels.size()) != n || static_cast<int>(mask.size()) != n)
        throw std::invalid_argument("cross_entropy: size mismatch");
    long count = 0;
    for (bool m : mask) count += m ? 1 : 0;
    if (pixels_out) *pixels_out = count;
    if (count == 0) return Tensor::scalar(0.0);
    Tensor pick = Tensor::zeros({n, c});
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c) throw std::invalid_argument("cross_entropy: label out of range");
        pick.data()[static_cast<long>(i) * c + y] = -1.0 / static_cast<double>(count);
    }
    return reduce_sum_all(tape, mul(tape, log_softmax(tape, logits, 1), pick));
}

inline Tensor supervised_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels,
                              long* pixels_out = nullptr) {
    if (labels.empty() || logits.shape[0] == 0)
        throw std::logic_error("supervised_loss: empty labeled batch");
    std::vector<bool> all(labels.size(), true);
    return masked_cross_entropy(tape, logits, labels, all, pixels_out);
}

inline Tensor unsupervised_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels,
                                const std::vector<bool>& mask, long* pixels_out = nullptr) {
    return masked_cross_entropy(tape, logits, labels, mask, pixels_out);
}

// Prototype-anchored InfoNCE. Anchors are pulled toward their class
// prototype (a constant: the bank is EMA-maintained, not SGD-trained)
// and pushed from sampled other-class representations. Classes without
// anchors drop out of the class average.
inline Tensor contrastive_loss(Tape* tape, const Tensor& reps,
                               const std::map<int, std::vector<int>>& anchors,
                               const std::map<int, std::vector<int>>& negatives,
                               const PrototypeBank& bank, double tau, long* anchors_out = nullptr) {
    if (tau <= 0.0) throw ConfigError("contrastive_loss: tau must be positive");
    Tensor total = Tensor::scalar(0.0);
    int classes_used = 0;
    long anchor_count = 0;
    for (const auto& [c, pixels] : anchors) {
        if (pixels.empty()) continue;
        if (!bank.is_initialized(c))
            throw std::logic_error("contrastive_loss: anchor class has no prototype");
        Tensor a = gather_rows(tape, reps, pixels);  // [m x d]
        Tensor rho({bank.dim(), 1},
                   std::vector<double>(bank.prototype(c), bank.prototype(c) + bank.dim()));
        Tensor s_pos = scale(tape, matmul(tape, a, rho), 1.0 / tau);  // [m x 1]
        Tensor logits = s_pos;
        auto it = negatives.find(c);
        if (it != negatives.end() && !it->second.empty()) {
            Tensor zn = gather_rows(tape, reps, it->second);                      // [k x d]
            Tensor s_neg = scale(tape, matmul(tape, a, transpose(tape, zn)), 1.0 / tau);
            logits = concat_cols(tape, s_pos, s_neg);  // [m x (1+k)]
        }
        Tensor lse = logsumexp(tape, logits, 1);                         // [m x 1]
        Tensor per_anchor = sub(tape, lse, s_pos);                       // >= 0
        total = add(tape, total, reduce_mean_all(tape, per_anchor));
        ++classes_used;
        anchor_count += static_cast<long>(pixels.size());
    }
    if (anchors_out) *anchors_out = anchor_count;
    if (classes_used == 0) return Tensor::scalar(0.0);
    return scale(tape, total, 1.0 / classes_used);
}

inline Tensor total_loss(Tape* tape, const Tensor& l_s, const Tensor& l_u, const Tensor& l_c,
                         double lambda_c) {
    if (lambda_c < 0.0) throw ConfigError("total_loss: lambda_c must be non-negative");
    return add(tape, add(tape, l_s, l_u), scale(tape, l_c, lambda_c));
}

// lr = lr_base * (1 - epoch/total_epoch)^0.9; `epoch` may be fractional.
inline double poly_lr(double lr_base, double epoch, double total_epoch) {
    if (epoch < 0.0 || epoch > total_epoch)
        throw std::logic_error("poly_lr: epoch out of range");
    return lr_base * std::pow(1.0 - epoch / total_epoch, 0.9);
}

}  // namespace css
