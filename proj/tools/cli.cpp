#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "config.hpp"
#include "insight/grad_check.hpp"
#include "insight/seeding.hpp"
#include "insight/sizing.hpp"
#include "insight/train.hpp"
#include "json.hpp"

#ifndef INSIGHT_TOOL_VERSION
#define INSIGHT_TOOL_VERSION "0.0.0"
#endif

namespace insight::cli {

const char* tool_version() noexcept { return INSIGHT_TOOL_VERSION; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

/// A check that ran to completion but did not pass.
class CheckFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Context {
    RunConfig config;
    std::string hash;
    fs::path out_dir;
    bool quiet = false;
    std::ostream* out = nullptr;

    [[nodiscard]] std::string prefix() const {
        return hash + "," + std::to_string(config.seed) + "," + tool_version() + ",";
    }
    [[nodiscard]] static std::string prefix_header() { return "config_hash,seed,tool_version,"; }

    [[nodiscard]] std::map<std::string, std::string> provenance(const std::string& command) const {
        return {{"config_hash", hash},
                {"seed", std::to_string(config.seed)},
                {"tool_version", tool_version()},
                {"command", command}};
    }

    [[nodiscard]] fs::path path(const std::string& name) const { return out_dir / name; }

    void wrote(const fs::path& p) const {
        if (!quiet) *out << "wrote " << p.string() << '\n';
    }
};

std::ofstream open_output(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
    return f;
}

/// Prepends the provenance columns to every line of a CSV block.
void write_prefixed(std::ostream& out, const std::string& header, const std::string& body,
                    const Context& ctx) {
    out << Context::prefix_header() << header << '\n';
    std::istringstream lines(body);
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty()) out << ctx.prefix() << line << '\n';
    }
}

void check_topology(const Context& ctx, const std::string& topology, const std::string& what) {
    if (topology != ctx.config.topology) {
        throw std::invalid_argument(what + " is for topology '" + topology +
                                    "' but the config selects '" + ctx.config.topology + "'");
    }
}

TrainRunConfig insight_run(const RunConfig& c) {
    TrainRunConfig r = c.run;
    r.seed = c.seed;
    return r;
}

TrainRunConfig fc_run(const RunConfig& c) {
    TrainRunConfig r = c.run;
    r.seed = c.seed;
    r.epochs = c.fc_epochs;
    r.learning_rate = c.fc.learning_rate;
    return r;
}

// datagen ----------------------------------------------------------------------

struct DatagenArgs {
    std::optional<std::size_t> n;
    std::string file = "dataset.csv";
};

void cmd_datagen(const Context& ctx, const DatagenArgs& a) {
    const auto& c = ctx.config;
    const std::size_t n = a.n.value_or(c.train_size + c.test_size);
    Dataset d = build_dataset(c.topology, c.technology, n, c.seed, c.threads);
    d.metadata = ctx.provenance("datagen");
    const fs::path p = ctx.path(a.file);
    save_dataset(d, p.string());
    ctx.wrote(p);
}

// train -------------------------------------------------------------------------

struct TrainArgs {
    std::string dataset;
    std::string model = "insight";
    std::string init;
};

void cmd_train(const Context& ctx, const TrainArgs& a) {
    const auto& c = ctx.config;
    const Dataset data = load_dataset(a.dataset);
    check_topology(ctx, data.topology, "dataset '" + a.dataset + "'");
    if (a.model == "fc") {
        if (!a.init.empty()) throw std::invalid_argument("--init applies to the insight model only");
        FCTrainResult r = train_fc_ensemble(data, c.fc, fc_run(c));
        r.ensemble.metadata = ctx.provenance("train");
        const fs::path p = ctx.path("fc_ensemble.fcens");
        save_fc_ensemble(r.ensemble, p.string());
        ctx.wrote(p);
        std::ofstream h = open_output(ctx.path("history.csv"));
        std::ostringstream body;
        for (std::size_t m = 0; m < r.member_histories.size(); ++m) {
            std::ostringstream one;
            write_history_csv(r.member_histories[m], one);
            std::istringstream lines(one.str());
            std::string line;
            std::getline(lines, line);  // member header
            while (std::getline(lines, line)) body << m << ',' << line << '\n';
        }
        write_prefixed(h, "member,epoch,train_loss,validation_loss,learning_rate,best", body.str(),
                       ctx);
        ctx.wrote(ctx.path("history.csv"));
        if (!ctx.quiet) {
            *ctx.out << "ensemble validation MSE " << fmt(r.ensemble_validation_mse) << '\n';
        }
        return;
    }
    if (a.model != "insight") throw std::invalid_argument("--model must be insight or fc");
    TrainResult r;
    if (a.init.empty()) {
        r = train_insight(data, c.model, insight_run(c), resolved_metric_order(c));
    } else {
        const SurrogateCheckpoint start = load_checkpoint(a.init);
        r = start.technology == data.technology ? fine_tune(start, data, insight_run(c))
                                                : transfer_finetune(start, data, insight_run(c));
    }
    for (auto& [k, v] : ctx.provenance("train")) r.checkpoint.metadata[k] = v;
    const fs::path p = ctx.path("checkpoint.ckpt");
    save_checkpoint(r.checkpoint, p.string());
    ctx.wrote(p);
    std::ofstream h = open_output(ctx.path("history.csv"));
    std::ostringstream one;
    write_history_csv(r.history, one);
    const std::string text = one.str();
    const auto eol = text.find('\n');
    write_prefixed(h, text.substr(0, eol), text.substr(eol + 1), ctx);
    ctx.wrote(ctx.path("history.csv"));
    if (!ctx.quiet) {
        *ctx.out << "epochs " << r.history.epochs.size() << ", best epoch " << r.history.best_epoch
                 << ", final train loss "
                 << (r.history.epochs.empty() ? 0.0 : r.history.epochs.back().train_loss) << '\n';
    }
}

// eval ----------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string fc_ensemble;
    std::string dataset;
    std::optional<std::string> mode;
    std::optional<std::size_t> prefix;
};

void emit_eval(const Context& ctx, const std::vector<EvalReport>& reports, const std::string& file) {
    std::ostringstream body;
    for (const auto& r : reports) write_eval_csv_rows(r, body);
    std::ofstream f = open_output(ctx.path(file));
    write_prefixed(f, eval_csv_header(), body.str(), ctx);
    ctx.wrote(ctx.path(file));
}

void cmd_eval(const Context& ctx, const EvalArgs& a) {
    const auto& c = ctx.config;
    const Dataset test = load_dataset(a.dataset);
    check_topology(ctx, test.topology, "dataset '" + a.dataset + "'");
    EvalReport rep;
    if (!a.fc_ensemble.empty()) {
        if (!a.checkpoint.empty()) {
            throw std::invalid_argument("give either --checkpoint or --fc-ensemble, not both");
        }
        rep = evaluate(load_fc_ensemble(a.fc_ensemble), test);
    } else if (!a.checkpoint.empty()) {
        const EvalMode mode = a.mode ? eval_mode_from_string(*a.mode) : c.eval_mode;
        rep = evaluate(load_checkpoint(a.checkpoint), test, mode,
                       a.prefix.value_or(c.known_prefix_len));
    } else {
        throw std::invalid_argument("eval needs --checkpoint or --fc-ensemble");
    }
    emit_eval(ctx, {rep}, "eval.csv");
    if (!ctx.quiet && c.table) print_eval_table(rep, *ctx.out);
}

// sweep ---------------------------------------------------------------------------

struct SweepArgs {
    std::string sizes;
    std::string topologies;
};

std::string sweep_header() {
    return "topology,technology,train_size,test_size,insight_r2,insight_mse,fc_r2,fc_mse,"
           "wall_insight_seconds,wall_fc_seconds";
}

void cmd_sweep(const Context& ctx, const SweepArgs& a) {
    const auto& c = ctx.config;
    const auto sizes = a.sizes.empty() ? c.sweep_sizes : parse_sizes(a.sizes);
    std::vector<std::string> topologies = c.sweep_topologies;
    if (!a.topologies.empty()) {
        topologies.clear();
        std::istringstream in(a.topologies);
        for (std::string t; std::getline(in, t, ',');) {
            if (!t.empty()) topologies.push_back(t);
        }
    }
    const auto registry = topology_names();
    if (topologies.empty()) topologies = registry;

    std::ostringstream rows, metrics;
    std::vector<std::vector<std::string>> table;
    for (const auto& topo : topologies) {
        const auto at = std::find(registry.begin(), registry.end(), topo);
        if (at == registry.end()) throw std::invalid_argument("unknown topology '" + topo + "'");
        const auto t_index = static_cast<std::uint64_t>(at - registry.begin());
        for (const auto& size : sizes) {
            const Dataset all = build_dataset(topo, c.technology, size.train + size.test,
                                              derive_seed(c.seed, t_index), c.threads);
            auto [train, test] = split(all, size.train, size.test, derive_seed(c.seed, 100 + t_index));
            const auto t0 = Clock::now();
            // A configured metric order only applies to its own topology.
            const auto order = topo == c.topology ? resolved_metric_order(c)
                                                  : std::vector<std::size_t>{};
            const TrainResult ins = train_insight(train, c.model, insight_run(c), order);
            const EvalReport ri = evaluate(ins.checkpoint, test, EvalMode::Rollout, 0);
            const double wall_insight = seconds_since(t0);
            const auto t1 = Clock::now();
            const FCTrainResult fc = train_fc_ensemble(train, c.fc, fc_run(c));
            const EvalReport rf = evaluate(fc.ensemble, test);
            const double wall_fc = seconds_since(t1);
            rows << ctx.prefix() << topo << ',' << c.technology << ',' << size.train << ','
                 << size.test << ',' << fmt(ri.aggregate_r2) << ',' << fmt(ri.aggregate_mse) << ','
                 << fmt(rf.aggregate_r2) << ',' << fmt(rf.aggregate_mse) << ',' << fmt(wall_insight)
                 << ',' << fmt(wall_fc) << '\n';
            write_eval_csv_rows(ri, metrics);
            write_eval_csv_rows(rf, metrics);
            std::ostringstream r2i, r2f;
            r2i << std::fixed << std::setprecision(4) << ri.aggregate_r2;
            r2f << std::fixed << std::setprecision(4) << rf.aggregate_r2;
            table.push_back({topo, std::to_string(size.train) + ":" + std::to_string(size.test),
                             r2i.str(), r2f.str()});
        }
    }
    {
        std::ofstream f = open_output(ctx.path("sweep.csv"));
        f << Context::prefix_header() << sweep_header() << '\n' << rows.str();
        ctx.wrote(ctx.path("sweep.csv"));
    }
    {
        std::ofstream f = open_output(ctx.path("sweep_metrics.csv"));
        write_prefixed(f, eval_csv_header(), metrics.str(), ctx);
        ctx.wrote(ctx.path("sweep_metrics.csv"));
    }
    if (!ctx.quiet && c.table) {
        std::ostream& o = *ctx.out;
        o << std::left << std::setw(16) << "topology" << std::setw(12) << "train:test"
          << std::right << std::setw(12) << "INSIGHT R2" << std::setw(12) << "FC R2" << '\n';
        for (const auto& r : table) {
            o << std::left << std::setw(16) << r[0] << std::setw(12) << r[1] << std::right
              << std::setw(12) << r[2] << std::setw(12) << r[3] << '\n';
        }
    }
}

// size / baseline -------------------------------------------------------------------

struct SizeArgs {
    std::string checkpoint;
    std::string pretrain;
};

std::string sizing_summary_header() {
    return "command,topology,technology,success,real_simulations,budget,rounds,finetune_rounds,"
           "final_fom,wall_seconds";
}

void emit_sizing(const Context& ctx, const std::string& command, const SizingTask& task,
                 const SizingResult& r, double wall) {
    const double final_fom = r.final_metrics.values.empty() ? std::nan("")
                                                            : fom(task.fom, r.final_metrics);
    {
        std::ofstream f = open_output(ctx.path(command + ".jsonl"));
        json head = ctx.provenance(command);
        head["event"] = "start";
        head["topology"] = task.topology;
        head["technology"] = task.technology;
        head["budget"] = task.budget;
        f << head.dump() << '\n';
        for (const auto& line : r.log) f << line << '\n';
        json done{{"event", "result"},
                  {"success", r.success},
                  {"real_simulations", r.real_simulations},
                  {"rounds", r.rounds},
                  {"finetune_rounds", r.finetune_rounds},
                  {"final_design", r.final_design.values},
                  {"final_metrics", r.final_metrics.values}};
        f << done.dump() << '\n';
        ctx.wrote(ctx.path(command + ".jsonl"));
    }
    {
        std::ofstream f = open_output(ctx.path(command + "_summary.csv"));
        f << Context::prefix_header() << sizing_summary_header() << '\n'
          << ctx.prefix() << command << ',' << task.topology << ',' << task.technology << ','
          << (r.success ? 1 : 0) << ',' << r.real_simulations << ',' << task.budget << ','
          << r.rounds << ',' << r.finetune_rounds << ',' << fmt(final_fom) << ',' << fmt(wall)
          << '\n';
        ctx.wrote(ctx.path(command + "_summary.csv"));
    }
    if (!ctx.quiet) *ctx.out << format_sizing_result(task, r);
}

void cmd_size(const Context& ctx, const SizeArgs& a) {
    const auto& c = ctx.config;
    const SizingTask task = sizing_task(c);
    const SurrogateCheckpoint ckpt = load_checkpoint(a.checkpoint);
    check_topology(ctx, ckpt.topology, "checkpoint '" + a.checkpoint + "'");
    std::optional<Dataset> pretrain;
    if (!a.pretrain.empty()) {
        pretrain = load_dataset(a.pretrain);
        check_topology(ctx, pretrain->topology, "dataset '" + a.pretrain + "'");
    }
    const auto t0 = Clock::now();
    const SizingResult r =
        insight_m_run(task, ckpt, c.ppo, c.insight_m, pretrain ? &*pretrain : nullptr);
    emit_sizing(ctx, "size", task, r, seconds_since(t0));
}

void cmd_baseline(const Context& ctx) {
    const auto& c = ctx.config;
    const SizingTask task = sizing_task(c);
    EnvConfig env = c.env;
    env.lanes = c.baseline_lanes;
    const auto t0 = Clock::now();
    const SizingResult r = pure_ppo_baseline(task, c.ppo, env);
    emit_sizing(ctx, "baseline", task, r, seconds_since(t0));
}

// gradcheck -------------------------------------------------------------------------

void cmd_gradcheck(const Context& ctx) {
    const auto& c = ctx.config;
    InsightModel model(c.model, SequenceLayout::identity(c.gradcheck_parameters, c.gradcheck_metrics),
                       derive_seed(c.seed, 0));
    std::mt19937_64 rng(derive_seed(c.seed, 1));
    std::normal_distribution<double> normal;
    Tensor x = Tensor::matrix(1, c.gradcheck_parameters);
    Tensor y = Tensor::matrix(1, c.gradcheck_metrics);
    for (double& v : x.values()) v = normal(rng);
    for (double& v : y.values()) v = normal(rng);
    GradCheckOptions opt;
    opt.epsilon = c.gradcheck_epsilon;
    opt.tolerance = c.gradcheck_tolerance;
    const auto t0 = Clock::now();
    const GradCheckReport rep = grad_check_model(model, model.teacher_tokens(x, y), y, opt);
    const double wall = seconds_since(t0);

    std::ofstream f = open_output(ctx.path("gradcheck.csv"));
    f << Context::prefix_header()
      << "block,entries,max_relative_error,max_absolute_error,tolerance,passed,wall_seconds\n";
    for (const auto& b : rep.blocks) {
        f << ctx.prefix() << b.name << ',' << b.entries << ',' << fmt(b.max_relative_error) << ','
          << fmt(b.max_absolute_error) << ',' << fmt(rep.tolerance) << ','
          << (b.max_relative_error < rep.tolerance ? 1 : 0) << ",\n";
    }
    f << ctx.prefix() << "all," << rep.entries << ',' << fmt(rep.max_relative_error) << ",,"
      << fmt(rep.tolerance) << ',' << (rep.passed() ? 1 : 0) << ',' << fmt(wall) << '\n';
    f.close();
    ctx.wrote(ctx.path("gradcheck.csv"));
    if (!ctx.quiet) {
        *ctx.out << "gradient check over " << rep.entries << " entries: max relative error "
                 << rep.max_relative_error << " (tolerance " << rep.tolerance << ") "
                 << (rep.passed() ? "PASS" : "FAIL") << '\n';
    }
    if (!rep.passed()) {
        throw CheckFailed("max relative error " + fmt(rep.max_relative_error) +
                          " is not below " + fmt(rep.tolerance));
    }
}

// bench -----------------------------------------------------------------------------

struct BenchArgs {
    std::string checkpoint;
    std::optional<std::size_t> batch;
};

void cmd_bench(const Context& ctx, const BenchArgs& a) {
    const auto& c = ctx.config;
    SurrogateCheckpoint ckpt;
    if (a.checkpoint.empty()) {
        auto order = resolved_metric_order(c);
        if (order.empty()) order = order_metrics(insight::topology(c.topology).schema);
        ckpt = make_checkpoint(build_dataset(c.topology, c.technology, 64, c.seed, c.threads),
                               c.model, std::move(order), c.seed);
    } else {
        ckpt = load_checkpoint(a.checkpoint);
        check_topology(ctx, ckpt.topology, "checkpoint '" + a.checkpoint + "'");
    }
    const std::size_t batch = a.batch.value_or(c.bench_batch);
    if (batch == 0) throw std::invalid_argument("--batch must be at least 1");
    const Dataset designs = build_dataset(c.topology, c.technology, batch, derive_seed(c.seed, 7),
                                          c.threads);
    const Tensor z = ckpt.design_matrix(designs);
    const std::size_t n = z.cols();

    Tensor batched;
    double best_batch = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < c.bench_repeats; ++r) {
        const auto t0 = Clock::now();
        batched = ckpt.model.rollout_batch(z, Tensor());
        best_batch = std::min(best_batch, seconds_since(t0));
    }
    double best_single = std::numeric_limits<double>::infinity();
    double max_diff = 0.0;
    Tensor one = Tensor::matrix(1, n);
    for (std::size_t r = 0; r < c.bench_repeats; ++r) {
        const auto t0 = Clock::now();
        for (std::size_t b = 0; b < batch; ++b) {
            std::copy(z.row(b).begin(), z.row(b).end(), one.row(0).begin());
            const Tensor y = ckpt.model.rollout_batch(one, Tensor());
            if (r == 0) {
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    max_diff = std::max(max_diff, std::abs(y(0, j) - batched(b, j)));
                }
            }
        }
        best_single = std::min(best_single, seconds_since(t0));
    }
    const double us_single = 1e6 * best_single / static_cast<double>(batch);
    const double us_batch = 1e6 * best_batch / static_cast<double>(batch);
    const double ratio = us_batch / us_single;
    std::ofstream f = open_output(ctx.path("bench.csv"));
    f << Context::prefix_header()
      << "topology,technology,batch_size,repeats,max_abs_difference,wall_single_us_per_sample,"
         "wall_batch_us_per_sample,wall_batch_to_single_ratio\n"
      << ctx.prefix() << c.topology << ',' << c.technology << ',' << batch << ','
      << c.bench_repeats << ',' << fmt(max_diff) << ',' << fmt(us_single) << ',' << fmt(us_batch)
      << ',' << fmt(ratio) << '\n';
    f.close();
    ctx.wrote(ctx.path("bench.csv"));
    if (!ctx.quiet) {
        *ctx.out << std::fixed << std::setprecision(2) << "batch 1:    " << us_single
                 << " us/sample\nbatch " << batch << ": " << us_batch << " us/sample\n"
                 << std::setprecision(4) << "ratio " << ratio << '\n'
                 << std::defaultfloat;
    }
}

void error_line(std::ostream& err, const std::string& command, const std::string& kind,
                const std::string& message) {
    err << json{{"status", "error"}, {"command", command}, {"kind", kind}, {"message", message}}
               .dump()
        << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"INSIGHT surrogate training and INSIGHT-M sizing", "insight"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    bool quiet = false;
    app.add_option("--config", config_path, "INI configuration file (defaults apply when omitted)");
    app.add_option("--seed", seed, "Override [training] seed");
    app.add_option("--out", out_dir,
                   std::string("Output directory (default: $") + kOutDirEnv + " or .)");
    app.add_flag("--quiet", quiet, "Suppress human-readable output on stdout");

    DatagenArgs dg;
    auto* datagen = app.add_subcommand("datagen", "Sample designs and label them with the oracle");
    datagen->add_option("--n", dg.n, "Rows (default train_size + test_size)");
    datagen->add_option("--file", dg.file, "File name inside the output directory")
        ->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a surrogate and write its history");
    train->add_option("--dataset", tr.dataset, "Training dataset file")->required();
    train->add_option("--model", tr.model, "insight or fc")->capture_default_str();
    train->add_option("--init", tr.init,
                      "Warm-start checkpoint (fine-tune, or transfer across technologies)");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Score a trained model on a dataset");
    eval->add_option("--checkpoint", ev.checkpoint, "INSIGHT checkpoint");
    eval->add_option("--fc-ensemble", ev.fc_ensemble, "FC ensemble file");
    eval->add_option("--dataset", ev.dataset, "Test dataset file")->required();
    eval->add_option("--mode", ev.mode, "rollout or teacher_forced (default from config)");
    eval->add_option("--prefix", ev.prefix, "Known prefix length (default from config)");

    SweepArgs sw;
    auto* sweep = app.add_subcommand("sweep", "INSIGHT vs FC ensemble over train:test sizes");
    sweep->add_option("--sizes", sw.sizes, "Size points, e.g. 300:100,1500:500");
    sweep->add_option("--topologies", sw.topologies, "Comma-separated topologies (default all)");

    SizeArgs sz;
    auto* size = app.add_subcommand("size", "INSIGHT-M model-based sizing");
    size->add_option("--checkpoint", sz.checkpoint, "Pre-trained checkpoint")->required();
    size->add_option("--pretrain", sz.pretrain, "Pre-training dataset mixed into fine-tuning");

    auto* baseline = app.add_subcommand("baseline", "PPO directly on the oracle");
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model");

    BenchArgs bn;
    auto* bench = app.add_subcommand("bench", "Single vs batched inference latency");
    bench->add_option("--checkpoint", bn.checkpoint, "Checkpoint (default: untrained model)");
    bench->add_option("--batch", bn.batch, "Batch size (default [report] bench_batch)");

    for (auto* sub : app.get_subcommands({})) {
        sub->fallthrough();
        sub->footer("Global options (before or after the subcommand): --config FILE, --seed N, "
                    "--out DIR, --quiet. The output directory defaults to $" +
                    std::string(kOutDirEnv) + ", then the working directory.");
    }

    std::string command = "insight";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        error_line(err, command, "usage", e.what());
        return 2;
    }
    for (auto* sub : app.get_subcommands()) command = sub->get_name();

    try {
        Context ctx;
        ctx.config = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (config_path.empty()) ctx.config.validate();
        if (seed) ctx.config.seed = *seed;
        ctx.hash = config_hash(ctx.config);
        if (out_dir.empty()) {
            const char* env = std::getenv(kOutDirEnv);
            out_dir = env && *env ? env : ".";
        }
        ctx.out_dir = out_dir;
        fs::create_directories(ctx.out_dir);
        ctx.quiet = quiet;
        ctx.out = &out;

        if (datagen->parsed()) cmd_datagen(ctx, dg);
        if (train->parsed()) cmd_train(ctx, tr);
        if (eval->parsed()) cmd_eval(ctx, ev);
        if (sweep->parsed()) cmd_sweep(ctx, sw);
        if (size->parsed()) cmd_size(ctx, sz);
        if (baseline->parsed()) cmd_baseline(ctx);
        if (gradcheck->parsed()) cmd_gradcheck(ctx);
        if (bench->parsed()) cmd_bench(ctx, bn);
    } catch (const ConfigError& e) {
        error_line(err, command, "config", e.what());
        return 2;
    } catch (const CheckFailed& e) {
        error_line(err, command, "check_failed", e.what());
        return 1;
    } catch (const DataError& e) {
        error_line(err, command, "data", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        error_line(err, command, "invalid_argument", e.what());
        return 2;
    } catch (const std::exception& e) {
        error_line(err, command, "failure", e.what());
        return 1;
    }
    return 0;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace insight::cli
