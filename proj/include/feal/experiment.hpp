#ifndef FEAL_EXPERIMENT_HPP
#define FEAL_EXPERIMENT_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "feal/data.hpp"
#include "feal/evidential.hpp"
#include "feal/federation.hpp"
#include "feal/losses.hpp"
#include "feal/nn.hpp"
#include "feal/numerics.hpp"
#include "feal/sampling.hpp"

namespace feal {

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, const std::string& what)
        : std::runtime_error("config field '" + field + "': " + what), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class ReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class TaskType { classification, segmentation };
enum class LossMode { evidential, task };

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
    TaskType task = TaskType::classification;
    std::size_t clients = 4;
    std::size_t classes = 3;
    std::size_t dim = 16;
    double shift_strength = 1.0;
    std::size_t samples_per_client = 500;
    std::size_t modes_per_class = 3;
    double class_separation = 1.6;
    double noise = 1.0;
    double class_imbalance = 0.35;

    std::size_t fal_rounds = 5;
    std::size_t comm_rounds = 30;
    std::size_t budget = 20;
    double annotation_cap = kMaxAnnotationRatio;

    Strategy strategy = Strategy::feal;
    LossMode loss = LossMode::evidential;
    double lambda = kDefaultLambdaClassification;
    LogitReduction reg_reduction = LogitReduction::sum;
    double tau = kClassificationRelaxation.tau;
    std::size_t min_neighbors = kClassificationRelaxation.min_neighbors;
    bool relaxation = true;
    UncertaintyComponents components;
    double epi_shift = 0.0;
    EntropyForm entropy_form = EntropyForm::standard;

    double lr = 5e-4;
    double weight_decay = 1e-5;
    std::size_t batch_size = 32;
    std::optional<std::size_t> local_steps;
    std::size_t local_epochs = 1;
    std::vector<std::size_t> hidden = {64, 64};
    bool log_every_round = true;

    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "runs/default";
};

namespace detail {

inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) {
            s += ',';
        }
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        out.push_back(trim(cur));
    }
    return out;
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

inline std::string components_text(const UncertaintyComponents& c) {
    std::vector<std::string> parts;
    if (c.epi_global) {
        parts.emplace_back("epi");
    }
    if (c.ale_global) {
        parts.emplace_back("ale_g");
    }
    if (c.ale_local) {
        parts.emplace_back("ale_l");
    }
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        s += (i ? "," : "") + parts[i];
    }
    return s;
}

/// Ordered key/value view of a config; also the canonical serialization.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
    using detail::fmt_real;
    return {
        {"version", std::to_string(kConfigVersion)},
        {"task", c.task == TaskType::classification ? "classification" : "segmentation"},
        {"clients", std::to_string(c.clients)},
        {"classes", std::to_string(c.classes)},
        {"dim", std::to_string(c.dim)},
        {"shift_strength", fmt_real(c.shift_strength)},
        {"samples_per_client", std::to_string(c.samples_per_client)},
        {"modes_per_class", std::to_string(c.modes_per_class)},
        {"class_separation", fmt_real(c.class_separation)},
        {"noise", fmt_real(c.noise)},
        {"class_imbalance", fmt_real(c.class_imbalance)},
        {"fal_rounds", std::to_string(c.fal_rounds)},
        {"comm_rounds", std::to_string(c.comm_rounds)},
        {"budget", std::to_string(c.budget)},
        {"annotation_cap", fmt_real(c.annotation_cap)},
        {"strategy", std::string(strategy_name(c.strategy))},
        {"loss", c.loss == LossMode::evidential ? "evidential" : "task"},
        {"lambda", fmt_real(c.lambda)},
        {"reg_reduction", c.reg_reduction == LogitReduction::sum ? "sum" : "mean"},
        {"tau", fmt_real(c.tau)},
        {"min_neighbors", std::to_string(c.min_neighbors)},
        {"relaxation", c.relaxation ? "on" : "off"},
        {"components", components_text(c.components)},
        {"epi_shift", fmt_real(c.epi_shift)},
        {"entropy_form", c.entropy_form == EntropyForm::standard ? "standard" : "per_class_gamma"},
        {"lr", fmt_real(c.lr)},
        {"weight_decay", fmt_real(c.weight_decay)},
        {"batch_size", std::to_string(c.batch_size)},
        {"local_steps", c.local_steps ? std::to_string(*c.local_steps) : "epoch"},
        {"local_epochs", std::to_string(c.local_epochs)},
        {"hidden", detail::join(c.hidden)},
        {"log_every_round", c.log_every_round ? "on" : "off"},
        {"seeds", detail::join(c.seeds)},
        {"output_dir", c.output_dir},
    };
}

inline std::string serialize_config(const ExperimentConfig& c) {
    std::string s = "# feal experiment config\n";
    for (const auto& [k, v] : config_entries(c)) {
        s += k + " = " + v + "\n";
    }
    return s;
}

/// Stable hash of every field except the output directory.
inline std::string config_hash(const ExperimentConfig& c) {
    std::string canon;
    for (const auto& [k, v] : config_entries(c)) {
        if (k != "output_dir") {
            canon += k + "=" + v + "\n";
        }
    }
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(canon)));
    return buf;
}

inline void validate_config(const ExperimentConfig& c) {
    auto require = [](bool ok, const char* field, const char* what) {
        if (!ok) {
            throw ConfigError(field, what);
        }
    };
    require(c.fal_rounds >= 1, "fal_rounds", "must be at least 1");
    require(c.comm_rounds >= 1, "comm_rounds", "must be at least 1");
    require(c.budget >= 1, "budget", "must be at least 1");
    require(c.clients >= 2, "clients", "must be at least 2");
    require(c.classes >= 2, "classes", "must be at least 2");
    require(c.task == TaskType::classification || c.classes == 2, "classes",
            "segmentation uses exactly 2 classes");
    require(c.dim >= 2, "dim", "must be at least 2");
    require(c.samples_per_client >= 10, "samples_per_client", "must be at least 10");
    require(c.shift_strength >= 0.0, "shift_strength", "must be non-negative");
    require(c.annotation_cap > 0.0 && c.annotation_cap <= 1.0, "annotation_cap", "must be in (0,1]");
    require(c.lambda >= 0.0, "lambda", "must be non-negative");
    require(c.tau > 0.0 && c.tau <= 1.0, "tau", "must be in (0,1]");
    require(c.min_neighbors >= 1, "min_neighbors", "must be at least 1");
    require(c.components.any(), "components", "needs at least one of epi, ale_g, ale_l");
    require(c.lr >= 0.0, "lr", "must be non-negative");
    require(c.weight_decay >= 0.0, "weight_decay", "must be non-negative");
    require(c.batch_size >= 1, "batch_size", "must be at least 1");
    require(!c.hidden.empty(), "hidden", "needs at least one hidden layer");
    require(std::find(c.hidden.begin(), c.hidden.end(), 0u) == c.hidden.end(), "hidden",
            "zero-width layer");
    require(!c.seeds.empty(), "seeds", "needs at least one seed");
    require(c.class_imbalance > 0.0 && c.class_imbalance <= 1.0, "class_imbalance",
            "must be in (0,1]");
    require(c.modes_per_class >= 1, "modes_per_class", "must be at least 1");
}

/// Segmentation-style defaults for fields the config file leaves unset.
inline void apply_segmentation_defaults(ExperimentConfig& c, const std::set<std::string>& explicit_keys) {
    auto unset = [&](const char* k) { return explicit_keys.count(k) == 0; };
    if (unset("classes")) c.classes = 2;
    if (unset("lambda")) c.lambda = kDefaultLambdaSegmentation;
    if (unset("tau")) c.tau = kSegmentationRelaxation.tau;
    if (unset("min_neighbors")) c.min_neighbors = kSegmentationRelaxation.min_neighbors;
    if (unset("samples_per_client")) c.samples_per_client = 40;
    if (unset("budget")) c.budget = 4;
    if (unset("comm_rounds")) c.comm_rounds = 10;
    if (unset("batch_size")) c.batch_size = 4;
    if (unset("modes_per_class")) c.modes_per_class = 1;
}

inline ExperimentConfig parse_config(std::istream& is) {
    ExperimentConfig c;
    std::set<std::string> seen;
    std::string line;
    bool versioned = false;
    auto to_size = [](const std::string& k, const std::string& v) {
        try {
            std::size_t pos = 0;
            const long long x = std::stoll(v, &pos);
            if (pos != v.size() || x < 0) {
                throw ConfigError(k, "expected a non-negative integer, got '" + v + "'");
            }
            return static_cast<std::size_t>(x);
        } catch (const std::logic_error&) {
            throw ConfigError(k, "expected a non-negative integer, got '" + v + "'");
        }
    };
    auto to_real = [](const std::string& k, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double x = std::stod(v, &pos);
            if (pos != v.size() || !std::isfinite(x)) {
                throw ConfigError(k, "expected a number, got '" + v + "'");
            }
            return x;
        } catch (const std::logic_error&) {
            throw ConfigError(k, "expected a number, got '" + v + "'");
        }
    };
    auto to_switch = [](const std::string& k, const std::string& v) {
        if (v == "on" || v == "true") return true;
        if (v == "off" || v == "false") return false;
        throw ConfigError(k, "expected on/off, got '" + v + "'");
    };
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(body, "expected 'key = value'");
        }
        const std::string k = detail::trim(body.substr(0, eq));
        const std::string v = detail::trim(body.substr(eq + 1));
        if (!seen.insert(k).second) {
            throw ConfigError(k, "duplicate key");
        }
        if (k == "version") {
            if (to_size(k, v) != static_cast<std::size_t>(kConfigVersion)) {
                throw ConfigError(k, "unsupported version " + v);
            }
            versioned = true;
        } else if (k == "task") {
            if (v == "classification") c.task = TaskType::classification;
            else if (v == "segmentation") c.task = TaskType::segmentation;
            else throw ConfigError(k, "expected classification or segmentation");
        } else if (k == "clients") c.clients = to_size(k, v);
        else if (k == "classes") c.classes = to_size(k, v);
        else if (k == "dim") c.dim = to_size(k, v);
        else if (k == "shift_strength") c.shift_strength = to_real(k, v);
        else if (k == "samples_per_client") c.samples_per_client = to_size(k, v);
        else if (k == "modes_per_class") c.modes_per_class = to_size(k, v);
        else if (k == "class_separation") c.class_separation = to_real(k, v);
        else if (k == "noise") c.noise = to_real(k, v);
        else if (k == "class_imbalance") c.class_imbalance = to_real(k, v);
        else if (k == "fal_rounds") c.fal_rounds = to_size(k, v);
        else if (k == "comm_rounds") c.comm_rounds = to_size(k, v);
        else if (k == "budget") c.budget = to_size(k, v);
        else if (k == "annotation_cap") c.annotation_cap = to_real(k, v);
        else if (k == "strategy") {
            try {
                c.strategy = parse_strategy(v);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(k, e.what());
            }
        } else if (k == "loss") {
            if (v == "evidential") c.loss = LossMode::evidential;
            else if (v == "task") c.loss = LossMode::task;
            else throw ConfigError(k, "expected evidential or task");
        } else if (k == "lambda") c.lambda = to_real(k, v);
        else if (k == "reg_reduction") {
            if (v == "sum") c.reg_reduction = LogitReduction::sum;
            else if (v == "mean") c.reg_reduction = LogitReduction::mean;
            else throw ConfigError(k, "expected sum or mean");
        } else if (k == "tau") c.tau = to_real(k, v);
        else if (k == "min_neighbors") c.min_neighbors = to_size(k, v);
        else if (k == "relaxation") c.relaxation = to_switch(k, v);
        else if (k == "components") {
            UncertaintyComponents comp{false, false, false};
            for (const auto& part : detail::split(v, ',')) {
                if (part == "epi") comp.epi_global = true;
                else if (part == "ale_g") comp.ale_global = true;
                else if (part == "ale_l") comp.ale_local = true;
                else throw ConfigError(k, "unknown component '" + part + "'");
            }
            c.components = comp;
        } else if (k == "epi_shift") c.epi_shift = to_real(k, v);
        else if (k == "entropy_form") {
            if (v == "standard") c.entropy_form = EntropyForm::standard;
            else if (v == "per_class_gamma") c.entropy_form = EntropyForm::per_class_gamma;
            else throw ConfigError(k, "expected standard or per_class_gamma");
        } else if (k == "lr") c.lr = to_real(k, v);
        else if (k == "weight_decay") c.weight_decay = to_real(k, v);
        else if (k == "batch_size") c.batch_size = to_size(k, v);
        else if (k == "local_steps") {
            if (v == "epoch") c.local_steps.reset();
            else c.local_steps = to_size(k, v);
        } else if (k == "local_epochs") c.local_epochs = to_size(k, v);
        else if (k == "hidden") {
            c.hidden.clear();
            for (const auto& part : detail::split(v, ',')) {
                c.hidden.push_back(to_size(k, part));
            }
        } else if (k == "log_every_round") c.log_every_round = to_switch(k, v);
        else if (k == "seeds") {
            c.seeds.clear();
            for (const auto& part : detail::split(v, ',')) {
                c.seeds.push_back(to_size(k, part));
            }
        } else if (k == "output_dir") c.output_dir = v;
        else {
            throw ConfigError(k, "unknown key");
        }
    }
    if (!versioned) {
        throw ConfigError("version", "missing; the first setting must be 'version = 1'");
    }
    if (c.task == TaskType::segmentation) {
        apply_segmentation_defaults(c, seen);
    }
    validate_config(c);
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("--config", "cannot open " + path.string());
    }
    return parse_config(is);
}

inline GeneratorConfig generator_config(const ExperimentConfig& c, std::uint64_t seed) {
    GeneratorConfig g;
    g.clients = c.clients;
    g.classes = c.classes;
    g.dim = c.dim;
    g.shift_strength = c.shift_strength;
    g.samples_per_client = c.samples_per_client;
    g.modes_per_class = c.modes_per_class;
    g.class_separation = c.class_separation;
    g.noise = c.noise;
    g.class_imbalance = c.class_imbalance;
    g.seed = derive_seed(seed, 1);
    return g;
}

inline MultiDomainData make_data(const ExperimentConfig& c, std::uint64_t seed) {
    const auto g = generator_config(c, seed);
    return c.task == TaskType::classification ? generate_multidomain(g) : generate_segmentation(g);
}

inline std::vector<std::size_t> architecture(const ExperimentConfig& c) {
    std::vector<std::size_t> w{c.dim};
    w.insert(w.end(), c.hidden.begin(), c.hidden.end());
    w.push_back(c.classes);
    return w;
}

inline TrainOptions train_options(const ExperimentConfig& c) {
    TrainOptions t;
    t.local_steps = c.local_steps;
    t.local_epochs = c.local_epochs;
    t.batch_size = c.batch_size;
    t.loss.task = c.task == TaskType::classification ? TaskKind::ce : TaskKind::dice;
    t.loss.lambda = c.loss == LossMode::evidential ? c.lambda : 0.0;
    t.loss.reduction = c.reg_reduction;
    t.adam.lr = c.lr;
    t.adam.weight_decay = c.weight_decay;
    return t;
}

inline CesOptions ces_options(const ExperimentConfig& c) {
    CesOptions o;
    o.components = c.components;
    o.relaxation = {c.tau, c.min_neighbors};
    o.use_relaxation = c.relaxation;
    o.calibration.entropy_form = c.entropy_form;
    o.calibration.epi_shift = c.epi_shift;
    return o;
}

struct MetricsRow {
    std::uint64_t seed = 0;
    std::size_t fal_round = 0;
    std::size_t labeled_total = 0;
    std::string strategy;
    double global_acc = 0.0;
    double global_bma = 0.0;
    std::optional<double> dice;
};

struct RoundRow {
    std::size_t fal_round = 0;
    std::size_t comm_round = 0;
    std::size_t client_id = 0;
    double train_loss = 0.0;
    double global_acc = 0.0;
    double global_bma = 0.0;
};

struct AuditRow {
    std::size_t fal_round = 0;
    std::size_t client_id = 0;
    std::size_t sample_index = 0;
    double score = 0.0;
    std::string strategy;
    std::size_t labeled_after = 0;
    std::size_t pool_size = 0;
};

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<MetricsRow> metrics;
    std::vector<RoundRow> rounds;
    std::vector<AuditRow> audit;
    std::vector<std::vector<std::size_t>> labeled_counts;  // [fal_round][client]
    std::size_t aggregate_calls = 0;
    ModelParams global;
    std::vector<std::string> warnings;
};

/// Full FAL protocol for one seed: random round-one annotation, then for each
/// round federated training, evaluation, and (before the next round)
/// strategy-driven selection and annotation.
inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    validate_config(cfg);
    SeedRun run;
    run.seed = seed;
    const auto data = make_data(cfg, seed);
    const auto& parts = data.partitions;
    const auto opts = train_options(cfg);
    const auto ces = ces_options(cfg);
    const std::string tag(strategy_name(cfg.strategy));

    ModelParams global = init_params(architecture(cfg), derive_seed(seed, 2));
    std::vector<ClientState> clients;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        clients.push_back(make_client(k, parts[k], cfg.budget));
        clients.back().local = global;
    }

    for (std::size_t r = 1; r <= cfg.fal_rounds; ++r) {
        for (auto& c : clients) {
            const std::size_t b = std::min(c.budget, cap_allowance(c, cfg.annotation_cap));
            QuerySet q;
            if (r == 1) {
                Rng rng(derive_seed(seed, 3 + c.id));
                q = random_select(c.unlabeled, b, rng);
            } else {
                Rng rng(derive_seed(seed, 5000 + r * 100 + c.id));
                q = select_queries(cfg.strategy, c, global, b, rng, ces);
            }
            if (b < c.budget) {
                run.warnings.push_back("fal_round " + std::to_string(r) + ": client " +
                                       std::to_string(c.id) + " reached the annotation cap");
            }
            const auto outcome = annotate_query(c, q, cfg.annotation_cap);
            for (auto pos : outcome.positions) {
                run.audit.push_back({r, c.id, q.indices[pos], q.scores[pos], r == 1 ? "random" : tag,
                                     c.labeled.size(), c.pool_size()});
            }
        }
        std::vector<std::size_t> counts;
        for (const auto& c : clients) {
            counts.push_back(c.labeled.size());
        }
        run.labeled_counts.push_back(counts);

        std::vector<RoundLog> log;
        global = federated_training(clients, global, cfg.comm_rounds, opts, parts,
                                    derive_seed(seed, 1000 + r), &log, cfg.log_every_round);
        run.aggregate_calls += log.size();
        for (const auto& entry : log) {
            if (!cfg.log_every_round && entry.comm_round != cfg.comm_rounds) {
                continue;
            }
            for (std::size_t k = 0; k < clients.size(); ++k) {
                run.rounds.push_back({r, entry.comm_round, k, entry.client_train_loss[k],
                                      entry.metrics.accuracy, entry.metrics.bma});
            }
        }
        const auto& final_metrics = log.back().metrics;
        MetricsRow row;
        row.seed = seed;
        row.fal_round = r;
        row.labeled_total = 0;
        for (auto n : counts) {
            row.labeled_total += n;
        }
        row.strategy = tag;
        row.global_acc = final_metrics.accuracy;
        row.global_bma = final_metrics.bma;
        row.dice = final_metrics.dice;
        run.metrics.push_back(row);
    }
    run.global = global;
    return run;
}

struct ExperimentResult {
    std::vector<SeedRun> seeds;

    std::vector<MetricsRow> metrics() const {
        std::vector<MetricsRow> all;
        for (const auto& s : seeds) {
            all.insert(all.end(), s.metrics.begin(), s.metrics.end());
        }
        return all;
    }
    /// Mean global BMA over seeds at one FAL round (1-based).
    double mean_bma(std::size_t fal_round) const {
        std::vector<double> v;
        for (const auto& s : seeds) {
            v.push_back(s.metrics.at(fal_round - 1).global_bma);
        }
        return mean(v);
    }
};

// Every CSV starts with a hash line and the config echo, then the column row.
inline void write_csv_preamble(std::ostream& os, const ExperimentConfig& cfg) {
    os << "# feal config_hash=" << config_hash(cfg) << '\n';
    for (const auto& [k, v] : config_entries(cfg)) {
        os << "# " << k << " = " << v << '\n';
    }
}

inline void write_metrics_csv(std::ostream& os, const ExperimentConfig& cfg,
                              const std::vector<MetricsRow>& rows) {
    using detail::fmt_real;
    write_csv_preamble(os, cfg);
    const bool dice = cfg.task == TaskType::segmentation;
    os << "seed,fal_round,labeled_total,strategy,global_acc,global_bma" << (dice ? ",dice" : "")
       << '\n';
    for (const auto& r : rows) {
        os << r.seed << ',' << r.fal_round << ',' << r.labeled_total << ',' << r.strategy << ','
           << fmt_real(r.global_acc) << ',' << fmt_real(r.global_bma);
        if (dice) {
            os << ',' << fmt_real(r.dice.value_or(0.0));
        }
        os << '\n';
    }
}

inline void write_rounds_csv(std::ostream& os, const ExperimentConfig& cfg,
                             const std::vector<RoundRow>& rows) {
    using detail::fmt_real;
    write_csv_preamble(os, cfg);
    os << "fal_round,comm_round,client_id,train_loss,global_acc,global_bma\n";
    for (const auto& r : rows) {
        os << r.fal_round << ',' << r.comm_round << ',' << r.client_id << ','
           << fmt_real(r.train_loss) << ',' << fmt_real(r.global_acc) << ','
           << fmt_real(r.global_bma) << '\n';
    }
}

inline void write_audit_csv(std::ostream& os, const ExperimentConfig& cfg,
                            const std::vector<AuditRow>& rows) {
    write_csv_preamble(os, cfg);
    os << "fal_round,client_id,sample_index,score,strategy\n";
    for (const auto& r : rows) {
        os << r.fal_round << ',' << r.client_id << ',' << r.sample_index << ','
           << detail::fmt_real(r.score) << ',' << r.strategy << '\n';
    }
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    return os;
}

inline std::filesystem::path seed_file(const std::filesystem::path& dir, const char* stem,
                                       std::uint64_t seed, const char* ext) {
    return dir / (std::string(stem) + "_seed" + std::to_string(seed) + ext);
}

/// Runs every configured seed. When `write_files` is set, the run directory
/// receives config.txt, metrics.csv and per-seed rounds/audit CSVs plus the
/// final global checkpoint.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_files = true) {
    validate_config(cfg);
    ExperimentResult result;
    for (auto seed : cfg.seeds) {
        result.seeds.push_back(run_seed(cfg, seed));
    }
    if (write_files) {
        const std::filesystem::path dir(cfg.output_dir);
        std::filesystem::create_directories(dir);
        {
            auto os = open_output(dir / "config.txt");
            os << "# feal config_hash=" << config_hash(cfg) << '\n' << serialize_config(cfg);
        }
        {
            auto os = open_output(dir / "metrics.csv");
            write_metrics_csv(os, cfg, result.metrics());
        }
        for (const auto& s : result.seeds) {
            {
                auto os = open_output(seed_file(dir, "rounds", s.seed, ".csv"));
                write_rounds_csv(os, cfg, s.rounds);
            }
            {
                auto os = open_output(seed_file(dir, "audit", s.seed, ".csv"));
                write_audit_csv(os, cfg, s.audit);
            }
            auto os = open_output(seed_file(dir, "global", s.seed, ".params"));
            save_params(os, s.global);
        }
    }
    return result;
}

enum class AblationAxis { uncertainty_components, tau, n, lambda, loss };

inline AblationAxis parse_axis(std::string_view s) {
    if (s == "uncertainty_components") return AblationAxis::uncertainty_components;
    if (s == "tau") return AblationAxis::tau;
    if (s == "n") return AblationAxis::n;
    if (s == "lambda") return AblationAxis::lambda;
    if (s == "loss") return AblationAxis::loss;
    throw std::invalid_argument("unknown ablation axis '" + std::string(s) + "'");
}

inline std::string_view axis_name(AblationAxis a) {
    switch (a) {
        case AblationAxis::uncertainty_components: return "uncertainty_components";
        case AblationAxis::tau: return "tau";
        case AblationAxis::n: return "n";
        case AblationAxis::lambda: return "lambda";
        case AblationAxis::loss: return "loss";
    }
    return "unknown";
}

struct AblationVariant {
    std::string label;
    ExperimentConfig config;
};

/// The sweep for one axis; every other field is taken from `base`.
inline std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base, AblationAxis axis) {
    std::vector<AblationVariant> out;
    auto variant = [&](std::string label, auto&& edit) {
        ExperimentConfig c = base;
        c.strategy = Strategy::feal;
        edit(c);
        out.push_back({std::move(label), std::move(c)});
    };
    switch (axis) {
        case AblationAxis::uncertainty_components: {
            // rows: ale_g; ale_l; ale_g+ale_l; epi; epi*ale_g; epi*ale_l; epi*(ale_g+ale_l)
            const UncertaintyComponents rows[] = {
                {false, true, false}, {false, false, true}, {false, true, true}, {true, false, false},
                {true, true, false},  {true, false, true},  {true, true, true}};
            for (const auto& comp : rows) {
                variant(components_text(comp), [&](ExperimentConfig& c) { c.components = comp; });
            }
            break;
        }
        case AblationAxis::tau:
            for (double t : {0.75, 0.80, 0.85, 0.90, 0.95}) {
                variant("tau=" + detail::fmt_real(t), [&](ExperimentConfig& c) { c.tau = t; });
            }
            variant("no_relaxation", [](ExperimentConfig& c) { c.relaxation = false; });
            break;
        case AblationAxis::n:
            for (std::size_t n : {1u, 3u, 5u, 7u, 10u}) {
                variant("n=" + std::to_string(n), [&](ExperimentConfig& c) { c.min_neighbors = n; });
            }
            variant("no_relaxation", [](ExperimentConfig& c) { c.relaxation = false; });
            break;
        case AblationAxis::lambda: {
            const bool seg = base.task == TaskType::segmentation;
            const std::vector<double> grid = seg ? std::vector<double>{1e-5, 5e-5, 1e-4, 5e-4, 1e-3}
                                                 : std::vector<double>{1e-3, 5e-3, 1e-2, 5e-2, 1e-1};
            for (double l : grid) {
                variant("lambda=" + detail::fmt_real(l), [&](ExperimentConfig& c) {
                    c.loss = LossMode::evidential;
                    c.lambda = l;
                });
            }
            break;
        }
        case AblationAxis::loss:
            variant("evidential", [](ExperimentConfig& c) { c.loss = LossMode::evidential; });
            variant("task", [](ExperimentConfig& c) { c.loss = LossMode::task; });
            break;
    }
    return out;
}

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    MetricsRow final_round;
};

struct AblationResult {
    AblationAxis axis;
    std::vector<AblationVariant> variants;
    std::vector<ExperimentResult> results;
    std::vector<AblationRow> rows;
};

inline AblationResult run_ablation(const ExperimentConfig& base, AblationAxis axis,
                                   bool write_files = true) {
    AblationResult out;
    out.axis = axis;
    out.variants = ablation_variants(base, axis);
    for (const auto& v : out.variants) {
        out.results.push_back(run_experiment(v.config, false));
        for (const auto& s : out.results.back().seeds) {
            out.rows.push_back({v.label, s.seed, s.metrics.back()});
        }
    }
    if (write_files) {
        const std::filesystem::path dir(base.output_dir);
        std::filesystem::create_directories(dir);
        auto os = open_output(dir / ("ablation_" + std::string(axis_name(axis)) + ".csv"));
        write_csv_preamble(os, base);
        os << "axis,variant,seed,fal_round,labeled_total,global_acc,global_bma\n";
        for (const auto& r : out.rows) {
            os << axis_name(axis) << ',' << r.variant << ',' << r.seed << ','
               << r.final_round.fal_round << ',' << r.final_round.labeled_total << ','
               << detail::fmt_real(r.final_round.global_acc) << ','
               << detail::fmt_real(r.final_round.global_bma) << '\n';
        }
    }
    return out;
}

/// Global model trained for the shift diagnostic: each client annotates a
/// random subset of budget * fal_rounds items (capped), then T FedAvg rounds.
inline ModelParams train_reference_global(const ExperimentConfig& cfg, const MultiDomainData& data,
                                          std::uint64_t seed) {
    ModelParams global = init_params(architecture(cfg), derive_seed(seed, 2));
    std::vector<ClientState> clients;
    for (std::size_t k = 0; k < data.partitions.size(); ++k) {
        clients.push_back(make_client(k, data.partitions[k], cfg.budget));
        auto& c = clients.back();
        Rng rng(derive_seed(seed, 3 + k));
        const auto want = std::min(cfg.budget * cfg.fal_rounds, cap_allowance(c, cfg.annotation_cap));
        annotate_query(c, random_select(c.unlabeled, want, rng), cfg.annotation_cap);
    }
    return federated_training(clients, global, cfg.comm_rounds, train_options(cfg),
                              data.partitions, derive_seed(seed, 999), nullptr);
}

inline void write_shift_matrix_csv(std::ostream& os, const ExperimentConfig& cfg,
                                   std::span<const double> m, std::size_t k) {
    write_csv_preamble(os, cfg);
    os << "client";
    for (std::size_t j = 0; j < k; ++j) {
        os << ",c" << j;
    }
    os << '\n';
    for (std::size_t i = 0; i < k; ++i) {
        os << 'c' << i;
        for (std::size_t j = 0; j < k; ++j) {
            os << ',' << detail::fmt_real(m[i * k + j]);
        }
        os << '\n';
    }
}

inline void write_kde_csv(std::ostream& os, const ExperimentConfig& cfg,
                          std::span<const Partition> parts, const ModelParams& p,
                          std::size_t points = 200) {
    std::vector<std::vector<double>> energies;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& part : parts) {
        energies.push_back(energy_scores(p, part));
        for (double e : energies.back()) {
            lo = std::min(lo, e);
            hi = std::max(hi, e);
        }
    }
    const double pad = 0.1 * std::max(hi - lo, 1e-6);
    std::vector<double> grid(points);
    for (std::size_t i = 0; i < points; ++i) {
        grid[i] = lo - pad + (hi - lo + 2 * pad) * static_cast<double>(i) / (points - 1);
    }
    write_csv_preamble(os, cfg);
    os << "client,x,density\n";
    for (std::size_t k = 0; k < energies.size(); ++k) {
        const auto curve = gaussian_kde(energies[k], grid);
        for (std::size_t i = 0; i < points; ++i) {
            os << k << ',' << detail::fmt_real(curve.x[i]) << ',' << detail::fmt_real(curve.density[i])
               << '\n';
        }
    }
}

/// Mean Dirichlet density over up to `max_items` test items of one client.
inline std::vector<SimplexPoint> client_simplex_grid(const ModelParams& p, const Partition& part,
                                                     int resolution, std::size_t max_items = 50) {
    std::vector<SimplexPoint> acc;
    std::size_t used = 0;
    for (auto i : part.test) {
        if (used == max_items) {
            break;
        }
        const auto d = alpha_from_logits(forward(p, part.cell_features(i, 0)).logits);
        auto grid = dirichlet_density_grid(d, resolution);
        if (acc.empty()) {
            acc = grid;
        } else {
            for (std::size_t j = 0; j < grid.size(); ++j) {
                acc[j].density += grid[j].density;
            }
        }
        ++used;
    }
    for (auto& pt : acc) {
        pt.density /= static_cast<double>(std::max<std::size_t>(used, 1));
    }
    return acc;
}

namespace detail {

inline std::optional<std::string> read_hash_line(const std::filesystem::path& p) {
    std::ifstream is(p);
    std::string line;
    if (!std::getline(is, line)) {
        return std::nullopt;
    }
    const std::string prefix = "# feal config_hash=";
    if (line.rfind(prefix, 0) != 0) {
        return std::nullopt;
    }
    return line.substr(prefix.size());
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::filesystem::path& p) {
    std::ifstream is(p);
    CsvTable t;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        auto cells = split(line, ',');
        if (t.header.empty()) {
            t.header = std::move(cells);
        } else {
            t.rows.push_back(std::move(cells));
        }
    }
    return t;
}

inline std::size_t column(const CsvTable& t, const std::string& name, const std::filesystem::path& p) {
    for (std::size_t i = 0; i < t.header.size(); ++i) {
        if (t.header[i] == name) {
            return i;
        }
    }
    throw ReportError(p.string() + ": missing column '" + name + "'");
}

}  // namespace detail

/// Aggregates a completed run directory into summary files and returns the
/// paths written.
inline std::vector<std::filesystem::path> emit_reports(const std::filesystem::path& dir,
                                                       int simplex_resolution = 60) {
    namespace fs = std::filesystem;
    std::vector<std::string> missing;
    for (const char* name : {"config.txt", "metrics.csv"}) {
        if (!fs::exists(dir / name)) {
            missing.push_back((dir / name).string());
        }
    }
    if (!missing.empty()) {
        std::string msg = "run directory is incomplete; missing:";
        for (const auto& m : missing) {
            msg += " " + m;
        }
        throw ReportError(msg);
    }
    const auto cfg = load_config(dir / "config.txt");
    const std::string hash = config_hash(cfg);
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".csv" || entry.path().filename() == "config.txt") {
            inputs.push_back(entry.path());
        }
    }
    std::sort(inputs.begin(), inputs.end());
    for (const auto& p : inputs) {
        const auto h = detail::read_hash_line(p);
        if (!h) {
            continue;
        }
        if (*h != hash) {
            throw ReportError("config hash mismatch in " + p.string() + ": " + *h + " vs " + hash);
        }
    }
    for (auto seed : cfg.seeds) {
        for (const char* stem : {"rounds", "audit"}) {
            const auto p = seed_file(dir, stem, seed, ".csv");
            if (!fs::exists(p)) {
                missing.push_back(p.string());
            }
        }
        const auto p = seed_file(dir, "global", seed, ".params");
        if (!fs::exists(p)) {
            missing.push_back(p.string());
        }
    }
    if (!missing.empty()) {
        std::string msg = "run directory is incomplete; missing:";
        for (const auto& m : missing) {
            msg += " " + m;
        }
        throw ReportError(msg);
    }

    const auto metrics_path = dir / "metrics.csv";
    const auto table = detail::read_csv(metrics_path);
    const auto c_strategy = detail::column(table, "strategy", metrics_path);
    const auto c_round = detail::column(table, "fal_round", metrics_path);
    const auto c_acc = detail::column(table, "global_acc", metrics_path);
    const auto c_bma = detail::column(table, "global_bma", metrics_path);
    std::optional<std::size_t> c_dice;
    if (std::find(table.header.begin(), table.header.end(), "dice") != table.header.end()) {
        c_dice = detail::column(table, "dice", metrics_path);
    }
    struct Cell {
        std::vector<double> acc, bma, dice;
    };
    std::map<std::pair<std::string, std::size_t>, Cell> groups;
    for (const auto& row : table.rows) {
        auto& cell = groups[{row.at(c_strategy), std::stoul(row.at(c_round))}];
        cell.acc.push_back(std::stod(row.at(c_acc)));
        cell.bma.push_back(std::stod(row.at(c_bma)));
        if (c_dice) {
            cell.dice.push_back(std::stod(row.at(*c_dice)));
        }
    }

    using detail::fmt_real;
    std::vector<fs::path> written;
    {
        const auto p = dir / "summary.csv";
        auto os = open_output(p);
        write_csv_preamble(os, cfg);
        os << "strategy,fal_round,n_seeds,acc_mean,acc_std,bma_mean,bma_std"
           << (c_dice ? ",dice_mean,dice_std" : "") << '\n';
        for (const auto& [key, cell] : groups) {
            os << key.first << ',' << key.second << ',' << cell.bma.size() << ','
               << fmt_real(mean(cell.acc)) << ',' << fmt_real(stddev(cell.acc)) << ','
               << fmt_real(mean(cell.bma)) << ',' << fmt_real(stddev(cell.bma));
            if (c_dice) {
                os << ',' << fmt_real(mean(cell.dice)) << ',' << fmt_real(stddev(cell.dice));
            }
            os << '\n';
        }
        written.push_back(p);
    }
    {
        const auto p = dir / "final_table.csv";
        auto os = open_output(p);
        write_csv_preamble(os, cfg);
        os << "strategy,final_round,acc_mean,acc_std,bma_mean,bma_std\n";
        std::map<std::string, std::size_t> last;
        for (const auto& [key, cell] : groups) {
            last[key.first] = std::max(last[key.first], key.second);
        }
        for (const auto& [strategy, round] : last) {
            const auto& cell = groups.at({strategy, round});
            os << strategy << ',' << round << ',' << fmt_real(mean(cell.acc)) << ','
               << fmt_real(stddev(cell.acc)) << ',' << fmt_real(mean(cell.bma)) << ','
               << fmt_real(stddev(cell.bma)) << '\n';
        }
        written.push_back(p);
    }
    {
        const auto p = dir / "selection_audit.csv";
        auto os = open_output(p);
        write_csv_preamble(os, cfg);
        os << "seed,fal_round,client_id,sample_index,score,strategy\n";
        for (auto seed : cfg.seeds) {
            const auto t = detail::read_csv(seed_file(dir, "audit", seed, ".csv"));
            for (const auto& row : t.rows) {
                os << seed;
                for (const auto& cell : row) {
                    os << ',' << cell;
                }
                os << '\n';
            }
        }
        written.push_back(p);
    }
    const auto seed = cfg.seeds.front();
    std::ifstream params_in(seed_file(dir, "global", seed, ".params"));
    const auto global = load_params(params_in);
    const auto data = make_data(cfg, seed);
    {
        const auto p = dir / "shift_matrix.csv";
        auto os = open_output(p);
        const auto m = domain_shift_report(data.partitions, global);
        write_shift_matrix_csv(os, cfg, m, data.partitions.size());
        written.push_back(p);
    }
    {
        const auto p = dir / "kde.csv";
        auto os = open_output(p);
        write_kde_csv(os, cfg, data.partitions, global);
        written.push_back(p);
    }
    if (cfg.classes == 3 && cfg.task == TaskType::classification) {
        const auto p = dir / "simplex_client0.csv";
        auto os = open_output(p);
        const auto grid = client_simplex_grid(global, data.partitions.front(), simplex_resolution);
        write_density_grid_csv(os, grid);
        written.push_back(p);
    }
    return written;
}

}  // namespace feal

#endif  // FEAL_EXPERIMENT_HPP
