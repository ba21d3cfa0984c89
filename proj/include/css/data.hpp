#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "css/config.hpp"
#include "css/rng.hpp"

namespace css {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kImageChannels = 3;

// Image stored [H*W x 3], row-major, values in [0,1]. Label is one
// class id per pixel, class 0 = background.
struct SegSample {
    std::vector<double> image;
    std::vector<std::uint8_t> label;
    int height = 0;
    int width = 0;
    int id = 0;
};

struct DataConfig {
    std::uint64_t seed = 1;
    int count = 16;
    int height = 32;
    int width = 32;
    int num_classes = 5;
    int shapes_per_image = 3;
    double noise_std = 0.05;

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (height < 16 || width < 16) throw ConfigError("H and W must be >= 16");
        if (count < 1) throw ConfigError("count must be >= 1");
        if (shapes_per_image < 0) throw ConfigError("shapes_per_image must be >= 0");
        if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
    }

    static DataConfig from_kv(const KvConfig& kv) {
        DataConfig c;
        c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
        c.count = static_cast<int>(kv.get_int("count", 16));
        c.height = static_cast<int>(kv.get_int("height", 32));
        c.width = static_cast<int>(kv.get_int("width", 32));
        c.num_classes = static_cast<int>(kv.get_int("num_classes"));
        c.shapes_per_image = static_cast<int>(kv.get_int("shapes_per_image", 3));
        c.noise_std = kv.get_double("noise_std", 0.05);
        c.validate();
        return c;
    }

    KvConfig to_kv() const {
        KvConfig kv;
        kv.set("seed", static_cast<long>(seed));
        kv.set("count", static_cast<long>(count));
        kv.set("height", static_cast<long>(height));
        kv.set("width", static_cast<long>(width));
        kv.set("num_classes", static_cast<long>(num_classes));
        kv.set("shapes_per_image", static_cast<long>(shapes_per_image));
        kv.set("noise_std", noise_std);
        return kv;
    }
};

namespace detail {

// Foreground palette. Classes 1 and 2 deliberately share a similar
// color distribution so the toy task has a confusable pair.
inline std::array<double, 3> class_color(int c) {
    switch (c) {
        case 1: return {0.75, 0.25, 0.25};
        case 2: return {0.82, 0.30, 0.22};
        case 3: return {0.25, 0.70, 0.30};
        case 4: return {0.25, 0.30, 0.80};
        default: {
            double h = std::fmod(0.61803398875 * c, 1.0) * 6.0;
            int i = static_cast<int>(h);
            double f = h - i;
            double p = 0.25, q = 0.85 - 0.6 * f, t = 0.25 + 0.6 * f;
            switch (i % 6) {
                case 0: return {0.85, t, p};
                case 1: return {q, 0.85, p};
                case 2: return {p, 0.85, t};
                case 3: return {p, q, 0.85};
                case 4: return {t, p, 0.85};
                default: return {0.85, p, q};
            }
        }
    }
}

inline bool in_triangle(double px, double py, double x0, double y0, double x1, double y1,
                        double x2, double y2) {
    auto sign = [](double ax, double ay, double bx, double by, double cx, double cy) {
        return (ax - cx) * (by - cy) - (bx - cx) * (ay - cy);
    };
    double d1 = sign(px, py, x0, y0, x1, y1);
    double d2 = sign(px, py, x1, y1, x2, y2);
    double d3 = sign(px, py, x2, y2, x0, y0);
    bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
    bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
    return !(has_neg && has_pos);
}

}  // namespace detail

inline SegSample generate_one(const DataConfig& cfg, int index) {
    const int H = cfg.height, W = cfg.width, C = cfg.num_classes;
    Rng rng(substream_seed(cfg.seed, "data") + static_cast<std::uint64_t>(index) * 0x9e37ULL);
    SegSample s;
    s.height = H;
    s.width = W;
    s.id = index;
    s.image.assign(static_cast<std::size_t>(H) * W * kImageChannels, 0.0);
    s.label.assign(static_cast<std::size_t>(H) * W, 0);

    // textured background: per-channel sinusoidal pattern, high variance
    double base[3], amp[3], fx, fy, phase[3];
    for (int c = 0; c < 3; ++c) base[c] = rng.uniform(0.30, 0.55);
    for (int c = 0; c < 3; ++c) amp[c] = rng.uniform(0.10, 0.20);
    fx = rng.uniform(0.08, 0.30);
    fy = rng.uniform(0.08, 0.30);
    for (int c = 0; c < 3; ++c) phase[c] = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            std::size_t p = static_cast<std::size_t>(y) * W + x;
            for (int c = 0; c < 3; ++c)
                s.image[p * 3 + c] =
                    base[c] + amp[c] * std::sin(6.283185307179586 * (fx * x + fy * y) + phase[c]);
        }

    // shapes: one foreground class each, non-overlapping bounding boxes
    const int smin = std::max(4, std::min(H, W) / 6);
    const int smax = std::max(smin + 1, std::min(H, W) / 3);
    for (int sh = 0; sh < cfg.shapes_per_image; ++sh) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            int cls = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(C - 1)));
            int size = smin + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(smax - smin)));
            int x0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(W - size)));
            int y0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(H - size)));
            bool clash = false;
            for (int y = y0; y < y0 + size && !clash; ++y)
                for (int x = x0; x < x0 + size; ++x)
                    if (s.label[static_cast<std::size_t>(y) * W + x] != 0) {
                        clash = true;
                        break;
                    }
            if (clash) continue;
            auto col = detail::class_color(cls);
            double jit[3];
            for (int c = 0; c < 3; ++c) jit[c] = rng.uniform(-0.05, 0.05);
            int kind = (cls - 1) % 3;  // 0 rect, 1 circle, 2 triangle
            double cx = x0 + size / 2.0, cy = y0 + size / 2.0, r = size / 2.0;
            for (int y = y0; y < y0 + size; ++y)
                for (int x = x0; x < x0 + size; ++x) {
                    bool inside = false;
                    switch (kind) {
                        case 0: inside = true; break;
                        case 1:
                            inside = (x + 0.5 - cx) * (x + 0.5 - cx) +
                                         (y + 0.5 - cy) * (y + 0.5 - cy) <=
                                     r * r;
                            break;
                        default:
                            inside = detail::in_triangle(x + 0.5, y + 0.5, cx, y0, x0, y0 + size - 1.0,
                                                         x0 + size - 1.0, y0 + size - 1.0);
                    }
                    if (!inside) continue;
                    std::size_t p = static_cast<std::size_t>(y) * W + x;
                    s.label[p] = static_cast<std::uint8_t>(cls);
                    for (int c = 0; c < 3; ++c) s.image[p * 3 + c] = col[c] + jit[c];
                }
            placed = true;
        }
        if (!placed) throw GenerationError("shape placement failed after 100 retries");
    }

    // additive noise, clipped to [0,1]
    for (auto& v : s.image) {
        v += rng.normal(0.0, cfg.noise_std);
        v = std::clamp(v, 0.0, 1.0);
    }
    return s;
}

inline std::vector<SegSample> generate(const DataConfig& cfg) {
    cfg.validate();
    std::vector<SegSample> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) out.push_back(generate_one(cfg, i));
    return out;
}

// Labeled/unlabeled split. Unlabeled ground truth lives behind an
// eval-only accessor that counts reads so tests can audit that training
// never touches it.
class DatasetSplit {
public:
    std::vector<SegSample> labeled;
    std::uint64_t seed = 0;

    void set_unlabeled(std::vector<SegSample> samples) { unlabeled_ = std::move(samples); }
    int unlabeled_count() const { return static_cast<int>(unlabeled_.size()); }
    const std::vector<double>& unlabeled_image(int i) const {
        return unlabeled_.at(static_cast<std::size_t>(i)).image;
    }
    int unlabeled_id(int i) const { return unlabeled_.at(static_cast<std::size_t>(i)).id; }
    int unlabeled_height(int i) const { return unlabeled_.at(static_cast<std::size_t>(i)).height; }
    int unlabeled_width(int i) const { return unlabeled_.at(static_cast<std::size_t>(i)).width; }

    const std::vector<std::uint8_t>& unlabeled_ground_truth_for_eval(int i) const {
        ++eval_reads_;
        return unlabeled_.at(static_cast<std::size_t>(i)).label;
    }
    long eval_label_reads() const { return eval_reads_; }

private:
    std::vector<SegSample> unlabeled_;
    mutable long eval_reads_ = 0;
};

inline DatasetSplit split(const std::vector<SegSample>& samples, int labeled_count,
                          std::uint64_t seed) {
    if (labeled_count <= 0) throw ConfigError("labeled_count must be >= 1");
    if (labeled_count > static_cast<int>(samples.size()))
        throw ConfigError("labeled_count exceeds sample count");
    std::vector<int> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Rng rng(substream_seed(seed, "split"));
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
        int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    DatasetSplit out;
    out.seed = seed;
    std::vector<SegSample> unl;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& s = samples[static_cast<std::size_t>(idx[i])];
        if (static_cast<int>(i) < labeled_count)
            out.labeled.push_back(s);
        else
            unl.push_back(s);
    }
    auto by_id = [](const SegSample& a, const SegSample& b) { return a.id < b.id; };
    std::sort(out.labeled.begin(), out.labeled.end(), by_id);
    std::sort(unl.begin(), unl.end(), by_id);
    out.set_unlabeled(std::move(unl));
    return out;
}

// Weak augmentation: horizontal flip (p = 0.5) + per-channel brightness
// jitter U(-0.05, 0.05), clipped.
inline SegSample augment(const SegSample& in, std::uint64_t seed) {
    Rng rng(seed);
    SegSample out = in;
    const int H = in.height, W = in.width;
    if (rng.coin()) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                std::size_t src = static_cast<std::size_t>(y) * W + (W - 1 - x);
                std::size_t dst = static_cast<std::size_t>(y) * W + x;
                out.label[dst] = in.label[src];
                for (int c = 0; c < 3; ++c) out.image[dst * 3 + c] = in.image[src * 3 + c];
            }
    }
    double jit[3];
    for (int c = 0; c < 3; ++c) jit[c] = rng.uniform(-0.05, 0.05);
    for (std::size_t p = 0; p < out.label.size(); ++p)
        for (int c = 0; c < 3; ++c)
            out.image[p * 3 + c] = std::clamp(out.image[p * 3 + c] + jit[c], 0.0, 1.0);
    return out;
}

// ---- PPM / PGM / manifest I/O ----

inline void write_ppm(const std::filesystem::path& path, const std::vector<double>& image, int H,
                      int W) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << "P6\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(H) * W * 3);
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& label,
                      int H, int W) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << "P5\n" << W << " " << H << "\n255\n";
    f.write(reinterpret_cast<const char*>(label.data()), static_cast<std::streamsize>(label.size()));
}

namespace detail {
inline void read_pnm_header(std::ifstream& f, const std::string& magic, int& W, int& H,
                            const std::string& path) {
    std::string m;
    f >> m;
    if (m != magic) throw DataError("bad magic in " + path);
    int maxval;
    f >> W >> H >> maxval;
    if (W <= 0 || H <= 0 || maxval != 255) throw DataError("bad header in " + path);
    f.get();  // single whitespace before raster
}
}  // namespace detail

inline std::vector<double> read_ppm(const std::filesystem::path& path, int& H, int& W) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    detail::read_pnm_header(f, "P6", W, H, path.string());
    std::vector<unsigned char> buf(static_cast<std::size_t>(H) * W * 3);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("truncated " + path.string());
    std::vector<double> out(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i] / 255.0;
    return out;
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& H, int& W) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    detail::read_pnm_header(f, "P5", W, H, path.string());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(H) * W);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("truncated " + path.string());
    return buf;
}

// Directory layout: manifest.txt + per-sample PPM/PGM. Manifest line:
// `<id> <labeled|unlabeled> <image file> <label file>`.
inline void export_dataset(const std::filesystem::path& dir, const DatasetSplit& sp) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir / "manifest.txt");
    if (!mf) throw DataError("cannot write manifest");
    auto emit = [&](const SegSample& s, const char* role) {
        char img[32], lab[32];
        std::snprintf(img, sizeof img, "image_%06d.ppm", s.id);
        std::snprintf(lab, sizeof lab, "label_%06d.pgm", s.id);
        write_ppm(dir / img, s.image, s.height, s.width);
        write_pgm(dir / lab, s.label, s.height, s.width);
        mf << s.id << " " << role << " " << img << " " << lab << "\n";
    };
    for (const auto& s : sp.labeled) emit(s, "labeled");
    for (int i = 0; i < sp.unlabeled_count(); ++i) {
        SegSample s;
        s.id = sp.unlabeled_id(i);
        s.height = sp.unlabeled_height(i);
        s.width = sp.unlabeled_width(i);
        s.image = sp.unlabeled_image(i);
        s.label = sp.unlabeled_ground_truth_for_eval(i);
        emit(s, "unlabeled");
    }
}

inline DatasetSplit import_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.txt");
    if (!mf) throw DataError("cannot open manifest in " + dir.string());
    DatasetSplit out;
    std::vector<SegSample> unl;
    int id;
    std::string role, img, lab;
    while (mf >> id >> role >> img >> lab) {
        SegSample s;
        s.id = id;
        int h1, w1, h2, w2;
        s.image = read_ppm(dir / img, h1, w1);
        s.label = read_pgm(dir / lab, h2, w2);
        if (h1 != h2 || w1 != w2) throw DataError("image/label size mismatch for id " + std::to_string(id));
        s.height = h1;
        s.width = w1;
        if (role == "labeled")
            out.labeled.push_back(std::move(s));
        else if (role == "unlabeled")
            unl.push_back(std::move(s));
        else
            throw DataError("manifest: unknown role " + role);
    }
    if (out.labeled.empty() && unl.empty()) throw DataError("manifest lists no samples");
    out.set_unlabeled(std::move(unl));
    return out;
}

}  // namespace css
