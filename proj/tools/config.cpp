#include "config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/crc.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace insight::cli {

namespace {

std::string trim(std::string s) {
    boost::algorithm::trim(s);
    return s;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    if (trim(text).empty()) return parts;
    boost::algorithm::split(parts, text, boost::is_any_of(","));
    for (auto& p : parts) {
        p = trim(p);
        if (p.empty()) throw ConfigError("empty element in list '" + text + "'");
    }
    return parts;
}

std::uint64_t parse_uint(const std::string& text) {
    const std::string t = trim(text);
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("expected a non-negative integer, got '" + text + "'");
    }
    try {
        return std::stoull(t);
    } catch (const std::out_of_range&) {
        throw ConfigError("integer out of range: '" + text + "'");
    }
}

double parse_double(const std::string& text) {
    const std::string t = trim(text);
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(t, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (t.empty() || used != t.size() || !std::isfinite(v)) {
        throw ConfigError("expected a finite number, got '" + text + "'");
    }
    return v;
}

bool parse_bool(const std::string& text) {
    const std::string t = boost::algorithm::to_lower_copy(trim(text));
    if (t == "true" || t == "yes" || t == "1") return true;
    if (t == "false" || t == "no" || t == "0") return false;
    throw ConfigError("expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& p : split_list(text)) out.push_back(parse_uint(p));
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
std::string join(const std::vector<T>& items) {
    std::ostringstream os;
    for (std::size_t i = 0; i < items.size(); ++i) os << (i ? "," : "") << items[i];
    return os.str();
}

std::string format_sizes(const std::vector<SizePoint>& sizes) {
    std::ostringstream os;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        os << (i ? "," : "") << sizes[i].train << ':' << sizes[i].test;
    }
    return os.str();
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

// Generic accessor-based field for nested members.
template <class Get, class Set>
Field field(std::string section, std::string key, Get get, Set set) {
    return {std::move(section), std::move(key), get, set};
}

#define INSIGHT_SIZE(section, key, expr)                                                      \
    field(section, key, [](const RunConfig& c) { return std::to_string(c.expr); },          \
          [](RunConfig& c, const std::string& v) {                                          \
              c.expr = static_cast<decltype(c.expr)>(parse_uint(v));                        \
          })
#define INSIGHT_DOUBLE(section, key, expr)                                                    \
    field(section, key, [](const RunConfig& c) { return format_double(c.expr); },           \
          [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); })
#define INSIGHT_BOOL(section, key, expr)                                                      \
    field(section, key, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
          [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); })

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(field(
            "topology", "name", [](const RunConfig& c) { return c.topology; },
            [](RunConfig& c, const std::string& v) { c.topology = trim(v); }));
        f.push_back(field(
            "technology", "name", [](const RunConfig& c) { return c.technology; },
            [](RunConfig& c, const std::string& v) { c.technology = trim(v); }));

        f.push_back(INSIGHT_SIZE("model", "d_model", model.d_model));
        f.push_back(INSIGHT_SIZE("model", "heads", model.heads));
        f.push_back(INSIGHT_SIZE("model", "layers", model.layers));
        f.push_back(INSIGHT_SIZE("model", "ff_multiplier", model.ff_multiplier));
        f.push_back(INSIGHT_SIZE("model", "output_heads", model.output_heads));
        f.push_back(INSIGHT_DOUBLE("model", "init_std", model.init_std));
        f.push_back(INSIGHT_DOUBLE("model", "layer_norm_epsilon", model.layer_norm_epsilon));
        f.push_back(INSIGHT_DOUBLE("model", "dropout", model.dropout));
        f.push_back(field(
            "model", "fc_hidden", [](const RunConfig& c) { return join(c.fc.hidden); },
            [](RunConfig& c, const std::string& v) { c.fc.hidden = parse_size_list(v); }));
        f.push_back(INSIGHT_SIZE("model", "fc_members", fc.members));
        f.push_back(INSIGHT_DOUBLE("model", "fc_learning_rate", fc.learning_rate));
        f.push_back(INSIGHT_SIZE("model", "gradcheck_parameters", gradcheck_parameters));
        f.push_back(INSIGHT_SIZE("model", "gradcheck_metrics", gradcheck_metrics));
        f.push_back(INSIGHT_DOUBLE("model", "gradcheck_epsilon", gradcheck_epsilon));
        f.push_back(INSIGHT_DOUBLE("model", "gradcheck_tolerance", gradcheck_tolerance));

        f.push_back(INSIGHT_SIZE("training", "seed", seed));
        f.push_back(INSIGHT_SIZE("training", "train_size", train_size));
        f.push_back(INSIGHT_SIZE("training", "test_size", test_size));
        f.push_back(INSIGHT_SIZE("training", "threads", threads));
        f.push_back(INSIGHT_SIZE("training", "epochs", run.epochs));
        f.push_back(INSIGHT_SIZE("training", "batch_size", run.batch_size));
        f.push_back(INSIGHT_DOUBLE("training", "learning_rate", run.learning_rate));
        f.push_back(INSIGHT_DOUBLE("training", "min_learning_rate", run.min_learning_rate));
        f.push_back(INSIGHT_SIZE("training", "schedule_epochs", run.schedule_epochs));
        f.push_back(INSIGHT_SIZE("training", "patience", run.patience));
        f.push_back(INSIGHT_DOUBLE("training", "validation_fraction", run.validation_fraction));
        f.push_back(INSIGHT_DOUBLE("training", "grad_clip", run.grad_clip));
        f.push_back(INSIGHT_SIZE("training", "fc_epochs", fc_epochs));
        f.push_back(field(
            "training", "metric_order", [](const RunConfig& c) { return join(c.metric_order); },
            [](RunConfig& c, const std::string& v) { c.metric_order = split_list(v); }));
        f.push_back(field(
            "training", "eval_mode",
            [](const RunConfig& c) { return std::string(to_string(c.eval_mode)); },
            [](RunConfig& c, const std::string& v) {
                try {
                    c.eval_mode = eval_mode_from_string(trim(v));
                } catch (const std::exception& e) {
                    throw ConfigError(e.what());
                }
            }));
        f.push_back(INSIGHT_SIZE("training", "known_prefix_len", known_prefix_len));

        f.push_back(INSIGHT_SIZE("sizing", "budget", budget));
        f.push_back(field(
            "sizing", "grid_points", [](const RunConfig& c) { return join(c.grid_points); },
            [](RunConfig& c, const std::string& v) { c.grid_points = parse_size_list(v); }));
        f.push_back(field(
            "sizing", "start", [](const RunConfig& c) { return join(c.start); },
            [](RunConfig& c, const std::string& v) { c.start = parse_size_list(v); }));
        f.push_back(field(
            "sizing", "targets", [](const RunConfig& c) { return c.targets; },
            [](RunConfig& c, const std::string& v) { c.targets = trim(v); }));
        f.push_back(INSIGHT_SIZE("sizing", "horizon", env.horizon));
        f.push_back(INSIGHT_SIZE("sizing", "lanes", env.lanes));
        f.push_back(INSIGHT_DOUBLE("sizing", "success_bonus", env.success_bonus));
        f.push_back(INSIGHT_SIZE("sizing", "baseline_lanes", baseline_lanes));
        f.push_back(field(
            "sizing", "ppo_hidden", [](const RunConfig& c) { return join(c.ppo.hidden); },
            [](RunConfig& c, const std::string& v) { c.ppo.hidden = parse_size_list(v); }));
        f.push_back(INSIGHT_DOUBLE("sizing", "clip", ppo.clip));
        f.push_back(INSIGHT_DOUBLE("sizing", "gamma", ppo.gamma));
        f.push_back(INSIGHT_DOUBLE("sizing", "gae_lambda", ppo.gae_lambda));
        f.push_back(INSIGHT_SIZE("sizing", "steps_per_iteration", ppo.steps_per_iteration));
        f.push_back(INSIGHT_SIZE("sizing", "ppo_epochs", ppo.epochs));
        f.push_back(INSIGHT_SIZE("sizing", "minibatch", ppo.minibatch));
        f.push_back(INSIGHT_DOUBLE("sizing", "entropy_coef", ppo.entropy_coef));
        f.push_back(INSIGHT_DOUBLE("sizing", "value_coef", ppo.value_coef));
        f.push_back(INSIGHT_DOUBLE("sizing", "ppo_learning_rate", ppo.learning_rate));
        f.push_back(INSIGHT_DOUBLE("sizing", "max_grad_norm", ppo.max_grad_norm));
        f.push_back(INSIGHT_SIZE("sizing", "initial_iterations", insight_m.initial_iterations));
        f.push_back(INSIGHT_SIZE("sizing", "refresh_iterations", insight_m.refresh_iterations));
        f.push_back(INSIGHT_SIZE("sizing", "candidate_episodes", insight_m.candidate_episodes));
        f.push_back(INSIGHT_DOUBLE("sizing", "ucb_beta", insight_m.ucb_beta));
        f.push_back(INSIGHT_DOUBLE("sizing", "pretrain_ratio", insight_m.pretrain_ratio));
        f.push_back(INSIGHT_BOOL("sizing", "finetune_on_failure", insight_m.finetune_on_failure));
        f.push_back(INSIGHT_DOUBLE("sizing", "fom_tolerance", insight_m.fom_tolerance));
        f.push_back(INSIGHT_SIZE("sizing", "finetune_epochs", insight_m.finetune.epochs));
        f.push_back(INSIGHT_SIZE("sizing", "finetune_batch_size", insight_m.finetune.batch_size));
        f.push_back(
            INSIGHT_DOUBLE("sizing", "finetune_learning_rate", insight_m.finetune.learning_rate));

        f.push_back(INSIGHT_BOOL("report", "table", table));
        f.push_back(field(
            "report", "sweep_sizes", [](const RunConfig& c) { return format_sizes(c.sweep_sizes); },
            [](RunConfig& c, const std::string& v) { c.sweep_sizes = parse_sizes(v); }));
        f.push_back(field(
            "report", "sweep_topologies",
            [](const RunConfig& c) { return join(c.sweep_topologies); },
            [](RunConfig& c, const std::string& v) { c.sweep_topologies = split_list(v); }));
        f.push_back(INSIGHT_SIZE("report", "bench_batch", bench_batch));
        f.push_back(INSIGHT_SIZE("report", "bench_repeats", bench_repeats));
        return f;
    }();
    return table;
}

#undef INSIGHT_SIZE
#undef INSIGHT_DOUBLE
#undef INSIGHT_BOOL

Constraint parse_target(const MetricSchema& schema, const std::string& text) {
    const bool at_least = text.find(">=") != std::string::npos;
    const bool at_most = text.find("<=") != std::string::npos;
    if (at_least == at_most) {
        throw ConfigError("target '" + text + "' needs exactly one of >= or <=");
    }
    const auto pos = text.find(at_least ? ">=" : "<=");
    const std::string name = trim(text.substr(0, pos));
    const auto index = schema.index_of(name);
    if (!index) throw ConfigError("target names unknown metric '" + name + "'");
    const double threshold = parse_double(text.substr(pos + 2));
    if (threshold == 0.0) throw ConfigError("target threshold for '" + name + "' must be nonzero");
    return {*index, at_least ? ConstraintSense::AtLeast : ConstraintSense::AtMost, threshold,
            1.0 / std::abs(threshold)};
}

}  // namespace

std::vector<SizePoint> parse_sizes(const std::string& text) {
    std::vector<SizePoint> out;
    for (const auto& item : split_list(text)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("size point '" + item + "' must look like TRAIN:TEST");
        }
        const SizePoint p{parse_uint(item.substr(0, colon)), parse_uint(item.substr(colon + 1))};
        if (p.train == 0 || p.test == 0) throw ConfigError("size point '" + item + "' is empty");
        out.push_back(p);
    }
    if (out.empty()) throw ConfigError("at least one size point is required");
    return out;
}

void RunConfig::validate() const {
    try {
        (void)insight::topology(topology);
        (void)insight::technology(technology);
        model.validate();
        TrainRunConfig r = run;
        r.validate();
        ppo.validate();
        env.validate();
        insight_m.validate();
        (void)sizing_task(*this);
        (void)resolved_metric_order(*this);
        for (const auto& t : sweep_topologies) (void)insight::topology(t);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (fc.members == 0) throw ConfigError("fc_members must be at least 1");
    if (!(fc.learning_rate > 0.0)) throw ConfigError("fc_learning_rate must be positive");
    if (gradcheck_parameters == 0 || gradcheck_metrics == 0) {
        throw ConfigError("gradcheck layout needs at least one parameter and one metric");
    }
    if (!(gradcheck_epsilon > 0.0) || !(gradcheck_tolerance > 0.0)) {
        throw ConfigError("gradcheck epsilon and tolerance must be positive");
    }
    if (baseline_lanes == 0) throw ConfigError("baseline_lanes must be at least 1");
    if (bench_batch == 0 || bench_repeats == 0) {
        throw ConfigError("bench_batch and bench_repeats must be at least 1");
    }
}

RunConfig parse_config(std::istream& in) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    std::map<std::string, std::map<std::string, const Field*>> known;
    for (const auto& f : fields()) known[f.section][f.key] = &f;

    RunConfig config;
    for (const auto& [section, body] : tree) {
        const auto s = known.find(section);
        if (s == known.end()) {
            if (body.empty() && !body.data().empty()) {
                throw ConfigError("config: key '" + section + "' must live inside a section");
            }
            throw ConfigError("config: unknown section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            const auto k = s->second.find(key);
            if (k == s->second.end()) {
                throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
            }
            try {
                k->second->set(config, value.data());
            } catch (const ConfigError& e) {
                throw ConfigError("config: [" + section + "] " + key + ": " + e.what());
            }
        }
    }
    config.validate();
    return config;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(in);
}

std::string canonical_config(const RunConfig& config) {
    std::ostringstream os;
    for (const auto& f : fields()) os << f.section << '.' << f.key << " = " << f.get(config) << '\n';
    return os.str();
}

std::string config_hash(const RunConfig& config) {
    // CRC-64/XZ parameters.
    boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
    const std::string text = canonical_config(config);
    crc.process_bytes(text.data(), text.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(crc.checksum()));
    return buf;
}

SizingTask sizing_task(const RunConfig& config) {
    SizingTask t = default_sizing_task(config.topology, config.technology);
    if (!config.targets.empty()) {
        t.fom.constraints.clear();
        const auto& schema = t.circuit().schema;
        for (const auto& item : split_list(config.targets)) {
            t.fom.constraints.push_back(parse_target(schema, item));
        }
    }
    t.grid_points = config.grid_points;
    t.start = config.start;
    t.budget = config.budget;
    t.seed = config.seed;
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[sizing] ") + e.what());
    }
    return t;
}

std::vector<std::size_t> resolved_metric_order(const RunConfig& config) {
    const auto& schema = insight::topology(config.topology).schema;
    std::vector<std::size_t> out;
    std::set<std::size_t> seen;
    for (const auto& name : config.metric_order) {
        const auto index = schema.index_of(name);
        if (!index) throw ConfigError("metric_order names unknown metric '" + name + "'");
        if (!seen.insert(*index).second) {
            throw ConfigError("metric_order repeats metric '" + name + "'");
        }
        out.push_back(*index);
    }
    if (!out.empty() && out.size() != schema.size()) {
        throw ConfigError("metric_order must list every metric of " + config.topology);
    }
    return out;
}

}  // namespace insight::cli
