#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "css/data.hpp"
#include "css/rng.hpp"
#include "css/tensor.hpp"

namespace css {

// Encoder (2x conv3x3) + segmentation head (conv3x3-ReLU-conv1x1) +
// representation head (conv3x3-ReLU-conv1x1). Feature maps are
// [H*W x channels]; convolutions run as im2col + matmul.
struct ModelParams {
    int width = 16;      // encoder channels
    int num_classes = 2;
    int rep_dim = 16;

    Tensor enc1_w, enc1_b;
    Tensor enc2_w, enc2_b;
    Tensor seg1_w, seg1_b;
    Tensor seg2_w, seg2_b;
    Tensor rep1_w, rep1_b;
    Tensor rep2_w, rep2_b;

    static ModelParams init(int num_classes, int width, int rep_dim, Rng& rng) {
        ModelParams p;
        p.width = width;
        p.num_classes = num_classes;
        p.rep_dim = rep_dim;
        auto he = [&rng](int fan_in, std::vector<int> shape) {
            Tensor t = Tensor::zeros(std::move(shape));
            const double s = std::sqrt(2.0 / fan_in);
            for (int i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, s);
            return t;
        };
        const int k2 = 9;
        p.enc1_w = he(kImageChannels * k2, {kImageChannels * k2, width});
        p.enc1_b = Tensor::zeros({1, width});
        p.enc2_w = he(width * k2, {width * k2, width});
        p.enc2_b = Tensor::zeros({1, width});
        p.seg1_w = he(width * k2, {width * k2, width});
        p.seg1_b = Tensor::zeros({1, width});
        p.seg2_w = he(width, {width, num_classes});
        p.seg2_b = Tensor::zeros({1, num_classes});
        p.rep1_w = he(width * k2, {width * k2, width});
        p.rep1_b = Tensor::zeros({1, width});
        p.rep2_w = he(width, {width, rep_dim});
        p.rep2_b = Tensor::zeros({1, rep_dim});
        return p;
    }

    std::vector<std::pair<std::string, Tensor*>> tensors() {
        return {{"enc1_w", &enc1_w}, {"enc1_b", &enc1_b}, {"enc2_w", &enc2_w}, {"enc2_b", &enc2_b},
                {"seg1_w", &seg1_w}, {"seg1_b", &seg1_b}, {"seg2_w", &seg2_w}, {"seg2_b", &seg2_b},
                {"rep1_w", &rep1_w}, {"rep1_b", &rep1_b}, {"rep2_w", &rep2_w}, {"rep2_b", &rep2_b}};
    }

    std::vector<Tensor*> tensor_ptrs() {
        std::vector<Tensor*> out;
        for (auto& [n, t] : tensors()) out.push_back(t);
        return out;
    }

    bool finite() const {
        auto& self = const_cast<ModelParams&>(*this);
        for (auto& [n, t] : self.tensors())
            if (!t->finite()) return false;
        return true;
    }
};

struct ForwardOut {
    Tensor logits;  // [H*W x C], unnormalized
    Tensor reps;    // [H*W x d], rows unit-norm
};

inline ForwardOut forward(Tape* tape, ModelParams& p, const std::vector<double>& image, int H,
                          int W) {
    if (static_cast<int>(image.size()) != H * W * kImageChannels)
        throw std::invalid_argument("forward: image size mismatch");
    Tensor x({H * W, kImageChannels}, image);
    auto conv3 = [&](const Tensor& in, int cin, Tensor& w, Tensor& b) {
        return add(tape, matmul(tape, im2col(tape, in, H, W, cin, 3), w), b);
    };
    Tensor h1 = relu(tape, conv3(x, kImageChannels, p.enc1_w, p.enc1_b));
    Tensor feat = relu(tape, conv3(h1, p.width, p.enc2_w, p.enc2_b));

    Tensor s1 = relu(tape, conv3(feat, p.width, p.seg1_w, p.seg1_b));
    Tensor logits = add(tape, matmul(tape, s1, p.seg2_w), p.seg2_b);

    Tensor r1 = relu(tape, conv3(feat, p.width, p.rep1_w, p.rep1_b));
    Tensor reps = l2_normalize(tape, add(tape, matmul(tape, r1, p.rep2_w), p.rep2_b), 1);
    return {logits, reps};
}

// Teacher: EMA mirror of the student, never SGD-updated.
struct TeacherState {
    ModelParams params;
    double momentum = 0.99;

    static TeacherState from_student(const ModelParams& student, double momentum) {
        TeacherState t;
        t.params = student;  // deep-copy buffers so SGD's copy-on-write cannot alias
        for (auto& [n, ten] : t.params.tensors()) {
            ten->store = std::make_shared<std::vector<double>>(*ten->store);
            ten->node = -1;
        }
        t.momentum = momentum;
        return t;
    }

    void ema_update(ModelParams& student) {
        auto ts = params.tensors();
        auto ss = student.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            Tensor* t = ts[i].second;
            Tensor* s = ss[i].second;
            if (t->shape != s->shape) throw std::logic_error("ema_update: shape mismatch");
            auto fresh = std::make_shared<std::vector<double>>(t->size());
            for (int j = 0; j < t->size(); ++j)
                (*fresh)[static_cast<std::size_t>(j)] =
                    momentum * t->data()[j] + (1.0 - momentum) * s->data()[j];
            t->store = std::move(fresh);
        }
    }
};

// ---- checkpoint I/O: text header (name, shape per tensor) + raw doubles ----

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint " + path.string());
    f << "CSS-CKPT 1\n" << entries.size() << "\n";
    for (const auto& [name, t] : entries) {
        f << name << " " << t.rank();
        for (int d : t.shape) f << " " << d;
        f << "\n";
    }
    for (const auto& [name, t] : entries)
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.size())));
}

inline std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint " + path.string());
    std::string magic;
    int version;
    f >> magic >> version;
    if (magic != "CSS-CKPT" || version != 1) throw DataError("bad checkpoint header");
    std::size_t n;
    f >> n;
    std::vector<std::pair<std::string, std::vector<int>>> headers;
    for (std::size_t i = 0; i < n; ++i) {
        std::string name;
        int rank;
        f >> name >> rank;
        std::vector<int> shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) f >> d;
        headers.emplace_back(name, shape);
    }
    f.get();  // newline before raw data
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, shape] : headers) {
        Tensor t = Tensor::zeros(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.size())));
        if (!f) throw DataError("truncated checkpoint " + path.string());
        out.emplace_back(name, std::move(t));
    }
    return out;
}

}  // namespace css
