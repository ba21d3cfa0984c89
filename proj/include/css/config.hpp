#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace css {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat `key = value` config with `#` comments and dotted keys. Keys are
// kept sorted so serialize() is canonical and round-trips exactly.
class KvConfig {
public:
    static KvConfig parse_string(const std::string& text) {
        KvConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": missing '='");
            std::string key = trim(s.substr(0, eq));
            std::string val = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = val;
        }
        return cfg;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse_string(ss.str());
    }

    std::string serialize() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
        return out.str();
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing required key `" + key + "`");
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& def) const {
        auto it = values_.find(key);
        return it == values_.end() ? def : it->second;
    }

    double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double def) const {
        return has(key) ? get_double(key) : def;
    }

    long get_int(const std::string& key) const { return to_int(key, get_string(key)); }
    long get_int(const std::string& key, long def) const { return has(key) ? get_int(key) : def; }

    void set(const std::string& key, const std::string& val) { values_[key] = val; }
    void set(const std::string& key, double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        values_[key] = ss.str();
    }
    void set(const std::string& key, long v) { values_[key] = std::to_string(v); }

    const std::map<std::string, std::string>& items() const { return values_; }

private:
    static std::string strip_comment(const std::string& s) {
        auto h = s.find('#');
        return h == std::string::npos ? s : s.substr(0, h);
    }
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return d;
        } catch (...) {
            throw ConfigError("key `" + key + "`: not a number: " + v);
        }
    }
    static long to_int(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            long i = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return i;
        } catch (...) {
            throw ConfigError("key `" + key + "`: not an integer: " + v);
        }
    }

    std::map<std::string, std::string> values_;
};

enum class Strategy { kSupervisedOnly, kLgtOnly, kRepOnly, kMix, kCross };
enum class IndicatorMode { kConf, kSmlr, kMix };

inline Strategy parse_strategy(const std::string& s) {
    if (s == "supervised_only") return Strategy::kSupervisedOnly;
    if (s == "lgt_only") return Strategy::kLgtOnly;
    if (s == "rep_only") return Strategy::kRepOnly;
    if (s == "mix") return Strategy::kMix;
    if (s == "cross") return Strategy::kCross;
    throw ConfigError("unknown strategy: " + s);
}

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::kSupervisedOnly: return "supervised_only";
        case Strategy::kLgtOnly: return "lgt_only";
        case Strategy::kRepOnly: return "rep_only";
        case Strategy::kMix: return "mix";
        case Strategy::kCross: return "cross";
    }
    return "?";
}

inline IndicatorMode parse_indicator_mode(const std::string& s) {
    if (s == "conf") return IndicatorMode::kConf;
    if (s == "smlr") return IndicatorMode::kSmlr;
    if (s == "mix") return IndicatorMode::kMix;
    throw ConfigError("unknown indicator_mode: " + s);
}

inline const char* indicator_mode_name(IndicatorMode m) {
    switch (m) {
        case IndicatorMode::kConf: return "conf";
        case IndicatorMode::kSmlr: return "smlr";
        case IndicatorMode::kMix: return "mix";
    }
    return "?";
}

struct SamplingConfig {
    double delta_u = 0.75;   // logit-space valid threshold
    double delta_w = 0.75;   // representation-space valid threshold
    double delta_s = 0.25;   // hard threshold
    int anchors_per_class = 64;
    int negatives_per_anchor = 32;
    double tau_neg = 1.0;

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!in01(delta_u) || !in01(delta_w) || !in01(delta_s))
            throw ConfigError("sampling thresholds must lie in [0,1]");
        if (delta_s > delta_w)
            throw ConfigError("sampling: delta_s must not exceed delta_w");
        if (anchors_per_class < 0 || negatives_per_anchor < 0)
            throw ConfigError("sampling counts must be non-negative");
        if (tau_neg <= 0.0) throw ConfigError("sampling: tau_neg must be positive");
    }
};

struct TrainConfig {
    std::uint64_t seed = 1;
    int total_epochs = 10;
    int warmup_epochs = 1;
    int batch_size_labeled = 4;
    int batch_size_unlabeled = 4;
    double lr_base = 0.0064;
    double teacher_momentum = 0.99;
    double proto_alpha = 0.99;
    double tau = 0.5;        // shared temperature for the indicator and contrastive loss
    double lambda_c = 0.1;
    SamplingConfig sampling;
    Strategy strategy = Strategy::kMix;
    IndicatorMode indicator_mode = IndicatorMode::kMix;
    int eval_every = 1;
    int encoder_width = 16;
    int rep_dim = 16;

    void validate() const {
        // warmup == total collapses to the supervised baseline; more is an error
        if (warmup_epochs > total_epochs)
            throw ConfigError("warmup_epochs must not exceed total_epochs");
        if (batch_size_labeled < 1 || batch_size_unlabeled < 1)
            throw ConfigError("batch sizes must be >= 1");
        if (lr_base < 0) throw ConfigError("lr_base must be non-negative");
        if (teacher_momentum < 0 || teacher_momentum > 1)
            throw ConfigError("teacher_momentum must lie in [0,1]");
        if (proto_alpha < 0 || proto_alpha > 1) throw ConfigError("alpha must lie in [0,1]");
        if (tau <= 0) throw ConfigError("tau must be positive");
        if (lambda_c < 0) throw ConfigError("lambda_c must be non-negative");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
        sampling.validate();
    }

    static TrainConfig from_kv(const KvConfig& kv) {
        TrainConfig c;
        c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
        c.total_epochs = static_cast<int>(kv.get_int("total_epochs", 10));
        c.warmup_epochs = static_cast<int>(kv.get_int("warmup_epochs", 1));
        c.batch_size_labeled = static_cast<int>(kv.get_int("batch_size_labeled", 4));
        c.batch_size_unlabeled = static_cast<int>(kv.get_int("batch_size_unlabeled", 4));
        c.lr_base = kv.get_double("lr_base", 0.0064);
        c.teacher_momentum = kv.get_double("teacher_momentum", 0.99);
        c.proto_alpha = kv.get_double("alpha", 0.99);
        c.tau = kv.get_double("tau", 0.5);
        c.lambda_c = kv.get_double("lambda_c", 0.1);
        c.sampling.delta_u = kv.get_double("sampling.delta_u", 0.75);
        c.sampling.delta_w = kv.get_double("sampling.delta_w", 0.75);
        c.sampling.delta_s = kv.get_double("sampling.delta_s", 0.25);
        c.sampling.anchors_per_class = static_cast<int>(kv.get_int("sampling.anchors_per_class", 64));
        c.sampling.negatives_per_anchor =
            static_cast<int>(kv.get_int("sampling.negatives_per_anchor", 32));
        c.sampling.tau_neg = kv.get_double("sampling.tau_neg", 1.0);
        c.strategy = parse_strategy(kv.get_string("strategy", "mix"));
        c.indicator_mode = parse_indicator_mode(kv.get_string("indicator_mode", "mix"));
        c.eval_every = static_cast<int>(kv.get_int("eval_every", 1));
        c.encoder_width = static_cast<int>(kv.get_int("encoder_width", 16));
        c.rep_dim = static_cast<int>(kv.get_int("rep_dim", 16));
        c.validate();
        return c;
    }

    KvConfig to_kv() const {
        KvConfig kv;
        kv.set("seed", static_cast<long>(seed));
        kv.set("total_epochs", static_cast<long>(total_epochs));
        kv.set("warmup_epochs", static_cast<long>(warmup_epochs));
        kv.set("batch_size_labeled", static_cast<long>(batch_size_labeled));
        kv.set("batch_size_unlabeled", static_cast<long>(batch_size_unlabeled));
        kv.set("lr_base", lr_base);
        kv.set("teacher_momentum", teacher_momentum);
        kv.set("alpha", proto_alpha);
        kv.set("tau", tau);
        kv.set("lambda_c", lambda_c);
        kv.set("sampling.delta_u", sampling.delta_u);
        kv.set("sampling.delta_w", sampling.delta_w);
        kv.set("sampling.delta_s", sampling.delta_s);
        kv.set("sampling.anchors_per_class", static_cast<long>(sampling.anchors_per_class));
        kv.set("sampling.negatives_per_anchor", static_cast<long>(sampling.negatives_per_anchor));
        kv.set("sampling.tau_neg", sampling.tau_neg);
        kv.set("strategy", std::string(strategy_name(strategy)));
        kv.set("indicator_mode", std::string(indicator_mode_name(indicator_mode)));
        kv.set("eval_every", static_cast<long>(eval_every));
        kv.set("encoder_width", static_cast<long>(encoder_width));
        kv.set("rep_dim", static_cast<long>(rep_dim));
        return kv;
    }
};

}  // namespace css
