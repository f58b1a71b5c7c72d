#ifndef FEDRIR_CONFIG_HPP
#define FEDRIR_CONFIG_HPP

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedrir/federation.hpp"

namespace fedrir {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Sectioned key-value experiment file. Keys are flat "section.key" strings;
// unknown keys are hard errors and command-line overrides win over file
// values.
class ExperimentConfig {
  public:
    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "data.kind", "data.classes", "data.per_class", "data.dim",
            "data.blob_spread", "data.images_path", "data.labels_path",
            "partition.kind", "partition.classes_per_client", "partition.alpha",
            "partition.train_fraction",
            "federation.clients", "federation.join_ratio", "federation.rounds",
            "federation.algorithm", "federation.ablation",
            "federation.reset_opt_on_broadcast", "federation.seed",
            "model.k_cs", "model.k_g", "model.hidden", "model.idm_hidden",
            "train.lr", "train.batch_size", "train.local_epochs",
            "train.mask_ratio", "train.mask_mode", "train.patch_edge",
            "train.idm_mode",
        };
        return keys;
    }

    void set(const std::string& key, const std::string& value) {
        if (!known_keys().count(key))
            throw ConfigError("unknown config key: " + key);
        values_[key] = value;
    }

    void parse_stream(std::istream& is, const std::string& origin) {
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": key outside any [section]");
            set(section + "." + key, trim(line.substr(eq + 1)));
        }
    }

    static ExperimentConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        ExperimentConfig cfg;
        cfg.parse_stream(f, path);
        return cfg;
    }

    // "section.key=value"
    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be section.key=value, got: " +
                              assignment);
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    FederationConfig to_federation_config() const {
        FederationConfig fc;
        const std::string data_kind = get("data.kind", "synthetic");
        if (data_kind == "synthetic") {
            fc.data.kind = DataSpec::Kind::kSynthetic;
        } else if (data_kind == "idx") {
            fc.data.kind = DataSpec::Kind::kIdx;
            fc.data.images_path = get("data.images_path", "");
            fc.data.labels_path = get("data.labels_path", "");
            if (fc.data.images_path.empty() || fc.data.labels_path.empty())
                throw ConfigError("idx data requires data.images_path and data.labels_path");
        } else {
            throw ConfigError("data.kind must be synthetic or idx, got: " + data_kind);
        }
        fc.data.classes = get_int("data.classes", 6);
        fc.data.per_class = get_int("data.per_class", 200);
        fc.data.dim = get_int("data.dim", 64);
        fc.data.blob_spread = get_double("data.blob_spread", kDefaultBlobSpread);

        const std::string part_kind = get("partition.kind", "pathological");
        if (part_kind == "pathological")
            fc.partition.kind = PartitionKind::kPathological;
        else if (part_kind == "dirichlet")
            fc.partition.kind = PartitionKind::kDirichlet;
        else
            throw ConfigError("partition.kind must be pathological or dirichlet");
        fc.partition.classes_per_client = get_int("partition.classes_per_client", 2);
        fc.partition.alpha = get_double("partition.alpha", 0.1);
        fc.partition.train_fraction = get_double("partition.train_fraction", 0.75);

        fc.clients = get_int("federation.clients", 20);
        fc.partition.clients = fc.clients;
        fc.rho = parse_join_ratio(get("federation.join_ratio", "1.0"));
        fc.rounds = get_int("federation.rounds", 50);
        fc.algorithm = parse_algorithm(get("federation.algorithm", "fedrir"));
        fc.ablation = parse_ablation(get("federation.ablation", "none"));
        fc.reset_opt_on_broadcast =
            get_bool("federation.reset_opt_on_broadcast", false);
        fc.seed = static_cast<uint64_t>(get_int("federation.seed", 1));

        fc.dims.input = fc.data.dim;
        fc.dims.classes = fc.data.classes;
        fc.dims.k_cs = get_int("model.k_cs", 32);
        fc.dims.k_g = get_int("model.k_g", 32);
        fc.dims.hidden = get_int_list("model.hidden", {128, 128});
        fc.dims.idm_hidden = get_int_list("model.idm_hidden", {64, 64, 64, 64});

        fc.lr = get_double("train.lr", 5e-4);
        fc.batch_size = get_int("train.batch_size", 100);
        fc.local_epochs = get_int("train.local_epochs", 1);
        fc.mask.ratio = get_double("train.mask_ratio", 0.6);
        const std::string mode = get("train.mask_mode", "elementwise");
        if (mode == "elementwise")
            fc.mask.mode = MaskMode::kElementwise;
        else if (mode == "patch")
            fc.mask.mode = MaskMode::kPatch;
        else
            throw ConfigError("train.mask_mode must be elementwise or patch");
        fc.mask.patch_edge = get_int("train.patch_edge", 4);
        const std::string idm_mode = get("train.idm_mode", "alternating");
        if (idm_mode == "alternating")
            fc.idm_mode = IdmMode::kAlternating;
        else if (idm_mode == "joint")
            fc.idm_mode = IdmMode::kJoint;
        else
            throw ConfigError("train.idm_mode must be alternating or joint");
        fc.validate();
        return fc;
    }

    // Effective configuration with every key made explicit; re-running from
    // the echo reproduces the run.
    std::string echo() const {
        ExperimentConfig full = *this;
        for (const auto& key : known_keys())
            if (!full.values_.count(key)) full.values_[key] = default_of(key);
        std::map<std::string, std::vector<std::pair<std::string, std::string>>> by_section;
        for (const auto& [key, value] : full.values_) {
            const auto dot = key.find('.');
            by_section[key.substr(0, dot)].push_back({key.substr(dot + 1), value});
        }
        std::ostringstream os;
        for (const auto& [section, entries] : by_section) {
            os << "[" << section << "]\n";
            for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
            os << "\n";
        }
        return os.str();
    }

    // Desk-calibrated synthetic blob spread (linear probe ~0.85 on the
    // default 6-class, d=64 pool).
    static constexpr double kDefaultBlobSpread = 0.155;

    static std::string default_of(const std::string& key) {
        static const std::map<std::string, std::string> defaults = {
            {"data.kind", "synthetic"},
            {"data.classes", "6"},
            {"data.per_class", "200"},
            {"data.dim", "64"},
            {"data.blob_spread", format_double(kDefaultBlobSpread)},
            {"data.images_path", ""},
            {"data.labels_path", ""},
            {"partition.kind", "pathological"},
            {"partition.classes_per_client", "2"},
            {"partition.alpha", "0.1"},
            {"partition.train_fraction", "0.75"},
            {"federation.clients", "20"},
            {"federation.join_ratio", "1.0"},
            {"federation.rounds", "50"},
            {"federation.algorithm", "fedrir"},
            {"federation.ablation", "none"},
            {"federation.reset_opt_on_broadcast", "false"},
            {"federation.seed", "1"},
            {"model.k_cs", "32"},
            {"model.k_g", "32"},
            {"model.hidden", "128,128"},
            {"model.idm_hidden", "64,64,64,64"},
            {"train.lr", "0.0005"},
            {"train.batch_size", "100"},
            {"train.local_epochs", "1"},
            {"train.mask_ratio", "0.6"},
            {"train.mask_mode", "elementwise"},
            {"train.patch_edge", "4"},
            {"train.idm_mode", "alternating"},
        };
        return defaults.at(key);
    }

    static std::string format_double(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

    static Algorithm parse_algorithm(const std::string& s) {
        if (s == "fedrir") return Algorithm::kFedRir;
        if (s == "fedavg") return Algorithm::kFedAvg;
        if (s == "local") return Algorithm::kLocal;
        throw ConfigError("federation.algorithm must be fedrir, fedavg or local");
    }

    static Ablation parse_ablation(const std::string& s) {
        if (s == "none") return Ablation::kNone;
        if (s == "r0") return Ablation::kR0;
        if (s == "no_mcsl") return Ablation::kNoMcsl;
        if (s == "no_id") return Ablation::kNoId;
        throw ConfigError("federation.ablation must be none, r0, no_mcsl or no_id");
    }

  private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return static_cast<int>(v);
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " is not an integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " is not a number: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key " + key + " is not a boolean: " + it->second);
    }

    std::vector<int> get_int_list(const std::string& key,
                                  std::vector<int> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<int> out;
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                out.push_back(std::stoi(tok));
            } catch (const std::exception&) {
                throw ConfigError("config key " + key + " is not an integer list: " + it->second);
            }
        }
        if (out.empty())
            throw ConfigError("config key " + key + " must be a non-empty list");
        return out;
    }

    JoinRatio parse_join_ratio(const std::string& s) const {
        JoinRatio r;
        const auto colon = s.find(':');
        try {
            if (colon == std::string::npos) {
                r.lo = r.hi = std::stod(s);
            } else {
                r.lo = std::stod(s.substr(0, colon));
                r.hi = std::stod(s.substr(colon + 1));
            }
        } catch (const std::exception&) {
            throw ConfigError("federation.join_ratio must be rho or lo:hi, got: " + s);
        }
        return r;
    }

    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Run artifacts

// Schema-stable metrics CSV: one train and one test row per client per
// round, ordered by (round, client_id, split).
inline std::string metrics_csv(const std::vector<RoundReport>& reports) {
    std::ostringstream os;
    os << "round,client_id,split,accuracy,loss_recon,loss_id,loss_cls,comm_up,comm_down\n";
    auto num = [](double v) {
        if (std::isnan(v)) return std::string("nan");
        return ExperimentConfig::format_double(v);
    };
    for (const auto& r : reports) {
        for (const auto& c : r.clients) {
            for (const char* split : {"train", "test"}) {
                os << r.round << ',' << c.client_id << ',' << split << ','
                   << num(split[0] == 't' && split[1] == 'r' ? c.train_acc : c.test_acc)
                   << ',' << num(c.loss_recon) << ',' << num(c.loss_id) << ','
                   << num(c.loss_cls) << ',' << c.comm_up << ',' << c.comm_down
                   << '\n';
            }
        }
    }
    return os.str();
}

}  // namespace fedrir

#endif  // FEDRIR_CONFIG_HPP
