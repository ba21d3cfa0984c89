#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "css/data.hpp"

namespace css {

// Row = ground truth, column = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes)
        : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {}

    void add(int truth, int pred) {
        if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_)
            throw std::invalid_argument("confusion: class out of range");
        ++counts_[static_cast<std::size_t>(truth) * classes_ + pred];
        ++total_;
    }

    void merge(const ConfusionMatrix& other) {
        if (other.classes_ != classes_) throw std::invalid_argument("confusion: size mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
        total_ += other.total_;
    }

    long at(int truth, int pred) const {
        return counts_[static_cast<std::size_t>(truth) * classes_ + pred];
    }
    long total() const { return total_; }
    int classes() const { return classes_; }

    long row_sum(int truth) const {
        long s = 0;
        for (int p = 0; p < classes_; ++p) s += at(truth, p);
        return s;
    }
    long col_sum(int pred) const {
        long s = 0;
        for (int t = 0; t < classes_; ++t) s += at(t, pred);
        return s;
    }

private:
    int classes_;
    std::vector<long> counts_;
    long total_ = 0;
};

struct MiouResult {
    std::vector<std::optional<double>> per_class;  // absent when the union is empty
    double miou = 0.0;
};

inline MiouResult miou_from_confusion(const ConfusionMatrix& cm) {
    MiouResult r;
    r.per_class.resize(static_cast<std::size_t>(cm.classes()));
    double sum = 0.0;
    int included = 0;
    for (int c = 0; c < cm.classes(); ++c) {
        const long tp = cm.at(c, c);
        const long uni = cm.row_sum(c) + cm.col_sum(c) - tp;
        if (uni == 0) continue;  // class absent from both maps
        double iou = static_cast<double>(tp) / static_cast<double>(uni);
        r.per_class[static_cast<std::size_t>(c)] = iou;
        sum += iou;
        ++included;
    }
    r.miou = included ? sum / included : 0.0;
    return r;
}

inline MiouResult miou(const std::vector<int>& pred, const std::vector<std::uint8_t>& truth,
                       int classes) {
    if (pred.size() != truth.size()) throw std::invalid_argument("miou: size mismatch");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(truth[i], pred[i]);
    return miou_from_confusion(cm);
}

// Pseudo-label quality accounting: IoU per label source, each restricted
// to that source's valid mask.
struct SourceQuality {
    std::string source;
    MiouResult result;
    long pixels = 0;
};

inline SourceQuality pseudo_label_quality(const std::string& source, const std::vector<int>& labels,
                                          const std::vector<bool>& mask,
                                          const std::vector<std::uint8_t>& truth, int classes) {
    if (labels.size() != mask.size() || labels.size() != truth.size())
        throw std::invalid_argument("pseudo_label_quality: size mismatch");
    ConfusionMatrix cm(classes);
    long px = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!mask[i]) continue;
        cm.add(truth[i], labels[i]);
        ++px;
    }
    return {source, miou_from_confusion(cm), px};
}

inline void write_per_class_iou_csv(const std::filesystem::path& path,
                                    const std::vector<SourceQuality>& rows) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << "source,class_id,iou\n";
    char buf[64];
    for (const auto& q : rows) {
        for (std::size_t c = 0; c < q.result.per_class.size(); ++c) {
            if (!q.result.per_class[c]) continue;
            std::snprintf(buf, sizeof buf, "%.17g", *q.result.per_class[c]);
            f << q.source << "," << c << "," << buf << "\n";
        }
        std::snprintf(buf, sizeof buf, "%.17g", q.result.miou);
        f << q.source << ",miou," << buf << "\n";
    }
}

// Indicator diagnostics: raw (confidence, cosine) pairs plus
// confidence-decile bins with per-class mean cosine.
struct IndicatorBin {
    int class_id;
    int bin;
    double mean_cosine;
    long count;
};

inline std::vector<IndicatorBin> indicator_bins(const std::vector<double>& conf,
                                                const std::vector<double>& cosine,
                                                const std::vector<int>& labels, int classes,
                                                int bins = 10) {
    if (conf.size() != cosine.size() || conf.size() != labels.size())
        throw std::invalid_argument("indicator_bins: size mismatch");
    std::vector<double> sums(static_cast<std::size_t>(classes) * bins, 0.0);
    std::vector<long> counts(static_cast<std::size_t>(classes) * bins, 0);
    for (std::size_t i = 0; i < conf.size(); ++i) {
        int b = static_cast<int>(conf[i] * bins);
        b = std::clamp(b, 0, bins - 1);
        std::size_t k = static_cast<std::size_t>(labels[i]) * bins + static_cast<std::size_t>(b);
        sums[k] += cosine[i];
        ++counts[k];
    }
    std::vector<IndicatorBin> out;
    for (int c = 0; c < classes; ++c)
        for (int b = 0; b < bins; ++b) {
            std::size_t k = static_cast<std::size_t>(c) * bins + static_cast<std::size_t>(b);
            if (counts[k] == 0) continue;
            out.push_back({c, b, sums[k] / counts[k], counts[k]});
        }
    return out;
}

inline void write_indicator_csvs(const std::filesystem::path& dir, const std::vector<double>& conf,
                                 const std::vector<double>& cosine, const std::vector<int>& labels,
                                 int classes, int bins = 10) {
    std::filesystem::create_directories(dir);
    char buf[64];
    {
        std::ofstream f(dir / "indicator_pairs.csv");
        f << "class_id,confidence,cosine\n";
        for (std::size_t i = 0; i < conf.size(); ++i) {
            f << labels[i] << ",";
            std::snprintf(buf, sizeof buf, "%.17g", conf[i]);
            f << buf << ",";
            std::snprintf(buf, sizeof buf, "%.17g", cosine[i]);
            f << buf << "\n";
        }
    }
    {
        std::ofstream f(dir / "indicator_bins.csv");
        f << "class_id,bin,mean_cosine,count\n";
        for (const auto& b : indicator_bins(conf, cosine, labels, classes, bins)) {
            std::snprintf(buf, sizeof buf, "%.17g", b.mean_cosine);
            f << b.class_id << "," << b.bin << "," << buf << "," << b.count << "\n";
        }
    }
}

}  // namespace css
