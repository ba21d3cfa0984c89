#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "css/tensor.hpp"

namespace css {

// Similarity sentinel for classes with no prototype yet: below the
// cosine range so it never wins an argmax.
constexpr double kUninitializedSim = -2.0;

struct ClassCentroid {
    std::vector<double> direction;  // unit-norm
    int count = 0;
};

// One EMA-maintained unit-norm prototype per class.
class PrototypeBank {
public:
    PrototypeBank(int num_classes, int dim, double alpha)
        : num_classes_(num_classes), dim_(dim), alpha_(alpha),
          rows_(static_cast<std::size_t>(num_classes) * dim, 0.0),
          initialized_(static_cast<std::size_t>(num_classes), false) {}

    int num_classes() const { return num_classes_; }
    int dim() const { return dim_; }
    double alpha() const { return alpha_; }
    int iteration() const { return iteration_; }
    bool is_initialized(int c) const { return initialized_.at(static_cast<std::size_t>(c)); }
    int initialized_count() const {
        int n = 0;
        for (bool b : initialized_) n += b ? 1 : 0;
        return n;
    }

    const double* prototype(int c) const {
        return rows_.data() + static_cast<std::size_t>(c) * dim_;
    }

    // Per-class mean of unit representations, re-normalized. Classes
    // with no valid pixels are absent; centroids that collapse below
    // norm 1e-6 are dropped (no direction information).
    static std::map<int, ClassCentroid> batch_centroids(const std::vector<double>& reps, int dim,
                                                        const std::vector<int>& classes,
                                                        const std::vector<bool>& valid) {
        const std::size_t n = classes.size();
        if (reps.size() != n * static_cast<std::size_t>(dim) || valid.size() != n)
            throw std::invalid_argument("batch_centroids: size mismatch");
        std::map<int, ClassCentroid> out;
        for (std::size_t i = 0; i < n; ++i) {
            if (!valid[i]) continue;
            auto& cc = out[classes[i]];
            if (cc.direction.empty()) cc.direction.assign(static_cast<std::size_t>(dim), 0.0);
            for (int d = 0; d < dim; ++d)
                cc.direction[static_cast<std::size_t>(d)] += reps[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)];
            ++cc.count;
        }
        for (auto it = out.begin(); it != out.end();) {
            auto& cc = it->second;
            double s = 0.0;
            for (double v : cc.direction) s += (v / cc.count) * (v / cc.count);
            double norm = std::sqrt(s);
            if (norm < 1e-6) {
                it = out.erase(it);  // degenerate (e.g. antipodal collapse)
                continue;
            }
            for (double& v : cc.direction) v = (v / cc.count) / norm;
            ++it;
        }
        return out;
    }

    // EMA step: rho_hat(t) = alpha*rho_hat(t-1) + (1-alpha)*centroid,
    // then re-normalized. First sighting of a class adopts the centroid
    // directly. Absent classes are untouched; t always advances.
    void ema_update(const std::map<int, ClassCentroid>& centroids) {
        for (const auto& [c, cc] : centroids) {
            if (c < 0 || c >= num_classes_)
                throw std::invalid_argument("ema_update: class id out of range");
            double* row = rows_.data() + static_cast<std::size_t>(c) * dim_;
            if (!initialized_[static_cast<std::size_t>(c)]) {
                for (int d = 0; d < dim_; ++d) row[d] = cc.direction[static_cast<std::size_t>(d)];
                initialized_[static_cast<std::size_t>(c)] = true;
                continue;
            }
            double s = 0.0;
            for (int d = 0; d < dim_; ++d) {
                row[d] = alpha_ * row[d] + (1.0 - alpha_) * cc.direction[static_cast<std::size_t>(d)];
                s += row[d] * row[d];
            }
            const double norm = std::max(std::sqrt(s), kEps);
            for (int d = 0; d < dim_; ++d) row[d] /= norm;
        }
        ++iteration_;
    }

    // Cosine of every representation against every prototype;
    // uninitialized classes get the sentinel row.
    std::vector<double> similarities(const std::vector<double>& reps, int count) const {
        if (reps.size() != static_cast<std::size_t>(count) * dim_)
            throw std::invalid_argument("similarities: size mismatch");
        std::vector<double> out(static_cast<std::size_t>(num_classes_) * count, kUninitializedSim);
        for (int c = 0; c < num_classes_; ++c) {
            if (!initialized_[static_cast<std::size_t>(c)]) continue;
            const double* row = prototype(c);
            for (int i = 0; i < count; ++i) {
                double s = 0.0;
                const double* z = reps.data() + static_cast<std::size_t>(i) * dim_;
                for (int d = 0; d < dim_; ++d) s += row[d] * z[d];
                out[static_cast<std::size_t>(c) * count + i] = s;
            }
        }
        return out;
    }

    // checkpoint support
    Tensor rows_tensor() const { return Tensor({num_classes_, dim_}, rows_); }
    Tensor flags_tensor() const {
        std::vector<double> f(initialized_.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = initialized_[i] ? 1.0 : 0.0;
        return Tensor({num_classes_}, std::move(f));
    }
    Tensor iter_tensor() const { return Tensor::scalar(iteration_); }

    void restore(const Tensor& rows, const Tensor& flags, const Tensor& iter) {
        if (rows.size() != static_cast<int>(rows_.size()) ||
            flags.size() != num_classes_)
            throw std::invalid_argument("prototype restore: shape mismatch");
        rows_.assign(rows.data(), rows.data() + rows.size());
        for (int c = 0; c < num_classes_; ++c)
            initialized_[static_cast<std::size_t>(c)] = flags.data()[c] != 0.0;
        iteration_ = static_cast<int>(iter.item());
    }

private:
    int num_classes_;
    int dim_;
    double alpha_;
    int iteration_ = 0;
    std::vector<double> rows_;
    std::vector<bool> initialized_;
};

}  // namespace css
