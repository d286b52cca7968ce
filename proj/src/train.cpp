#include "insight/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <queue>
#include <random>
#include <sstream>

#include "insight/optim.hpp"
#include "insight/seeding.hpp"

namespace insight {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kEvalChunk = 512;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows) {
    Tensor out = Tensor::matrix(rows.size(), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(src.row(rows[i]).begin(), src.row(rows[i]).end(), out.row(i).begin());
    }
    return out;
}

Tensor slice_rows(const Tensor& src, std::size_t begin, std::size_t end) {
    Tensor out = Tensor::matrix(end - begin, src.cols());
    for (std::size_t r = begin; r < end; ++r) {
        std::copy(src.row(r).begin(), src.row(r).end(), out.row(r - begin).begin());
    }
    return out;
}

std::pair<Dataset, Dataset> carve_validation(const Dataset& data, double fraction,
                                             std::uint64_t seed) {
    if (data.size() == 0) {
        throw std::invalid_argument("training set is empty");
    }
    std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size())));
    n_val = std::min(n_val, data.size() - 1);
    return split(data, data.size() - n_val, n_val, seed);
}

/// Minibatch loop shared by the surrogate and the FC members. Leaves the
/// parameters at the best validation loss seen (or at the last epoch when
/// there is no validation data).
struct Trainer {
    ParameterList params;
    std::size_t rows = 0;
    // Forward and backward on the given rows; returns the batch loss.
    std::function<double(std::span<const std::size_t>)> batch_step;
    // Empty when there is no validation data.
    std::function<double()> validation_loss;

    TrainHistory run(const TrainRunConfig& cfg, std::uint64_t shuffle_seed) {
        const auto start = Clock::now();
        TrainHistory h;
        h.train_rows = rows;
        const std::size_t batches = (rows + cfg.batch_size - 1) / cfg.batch_size;
        const std::size_t horizon = cfg.schedule_epochs ? cfg.schedule_epochs : cfg.epochs;
        Adam adam(params, CosineSchedule{cfg.learning_rate, cfg.min_learning_rate,
                                         std::max<std::size_t>(1, horizon * batches)});
        std::mt19937_64 rng(shuffle_seed);
        std::vector<std::size_t> order(rows);
        std::iota(order.begin(), order.end(), std::size_t{0});

        const bool has_val = static_cast<bool>(validation_loss);
        std::vector<Tensor> best;
        auto snapshot = [&] {
            best.clear();
            for (const Parameter* p : params) best.push_back(p->value);
        };
        h.best_validation_loss = has_val ? validation_loss() : kNaN;
        snapshot();
        std::size_t stale = 0;

        for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            const double lr = adam.current_lr();
            double total = 0.0;
            for (std::size_t b = 0; b < batches; ++b) {
                const std::size_t lo = b * cfg.batch_size;
                const std::size_t hi = std::min(rows, lo + cfg.batch_size);
                adam.zero_grad();
                double loss = kNaN;
                try {
                    loss = batch_step(std::span(order).subspan(lo, hi - lo));
                } catch (const NumericError&) {
                    // Reported below with the epoch and batch position.
                }
                if (!std::isfinite(loss)) {
                    std::ostringstream msg;
                    msg << "training diverged: non-finite loss at epoch " << epoch << ", batch "
                        << b << " (learning rate " << adam.current_lr() << ")";
                    throw TrainingError(msg.str());
                }
                if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
                adam.step();
                total += loss * static_cast<double>(hi - lo);
            }
            EpochRecord rec{epoch, total / static_cast<double>(rows), kNaN, lr};
            if (has_val) {
                try {
                    rec.validation_loss = validation_loss();
                } catch (const NumericError&) {
                    rec.validation_loss = kNaN;
                }
                if (!std::isfinite(rec.validation_loss)) {
                    throw TrainingError("training diverged: non-finite validation loss at epoch " +
                                        std::to_string(epoch));
                }
                if (rec.validation_loss < h.best_validation_loss) {
                    h.best_validation_loss = rec.validation_loss;
                    h.best_epoch = epoch;
                    snapshot();
                    stale = 0;
                } else {
                    ++stale;
                }
            }
            h.epochs.push_back(rec);
            if (has_val && cfg.patience > 0 && stale >= cfg.patience) break;
        }
        if (has_val) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
        } else {
            h.best_epoch = h.epochs.empty() ? 0 : h.epochs.back().epoch;
        }
        h.seconds = seconds_since(start);
        return h;
    }
};

double surrogate_loss(const InsightModel& model, const Tensor& x, const Tensor& y) {
    double total = 0.0;
    for (std::size_t lo = 0; lo < x.rows(); lo += kEvalChunk) {
        const std::size_t hi = std::min(x.rows(), lo + kEvalChunk);
        const Tensor xb = slice_rows(x, lo, hi);
        const Tensor yb = slice_rows(y, lo, hi);
        total += model.loss(model.forward(model.teacher_tokens(xb, yb)), yb) *
                 static_cast<double>(hi - lo);
    }
    return total / static_cast<double>(x.rows());
}

/// Trains `ckpt.model` in place on `fit` with early stopping on `val`.
TrainHistory fit_surrogate(SurrogateCheckpoint& ckpt, const Dataset& fit, const Dataset& val,
                           const TrainRunConfig& run) {
    const Tensor x = ckpt.design_matrix(fit);
    const Tensor y = ckpt.target_matrix(fit);
    Tensor xv, yv;
    if (val.size() > 0) {
        xv = ckpt.design_matrix(val);
        yv = ckpt.target_matrix(val);
    }
    InsightModel& model = ckpt.model;
    Trainer t;
    t.params = model.parameters();
    t.rows = fit.size();
    ForwardCache cache;
    t.batch_step = [&](std::span<const std::size_t> rows) {
        const Tensor xb = gather_rows(x, rows);
        const Tensor yb = gather_rows(y, rows);
        const Tensor heads = model.forward(model.teacher_tokens(xb, yb), &cache);
        const double loss = model.loss(heads, yb);
        if (std::isfinite(loss)) model.backward(cache, yb);
        return loss;
    };
    if (val.size() > 0) {
        t.validation_loss = [&] { return surrogate_loss(model, xv, yv); };
    }
    TrainHistory h = t.run(run, derive_seed(run.seed, 1));
    h.validation_rows = val.size();
    return h;
}

void stamp(SurrogateCheckpoint& c, const TrainRunConfig& run, const TrainHistory& h) {
    c.metadata["train_seed"] = std::to_string(run.seed);
    c.metadata["train_rows"] = std::to_string(h.train_rows);
    c.metadata["validation_rows"] = std::to_string(h.validation_rows);
    c.metadata["best_epoch"] = std::to_string(h.best_epoch);
}

}  // namespace

void TrainRunConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
    if (!(validation_fraction >= 0.0 && validation_fraction <= 0.5)) {
        throw std::invalid_argument("validation fraction must lie in [0, 0.5]");
    }
    if (!(learning_rate > 0.0) || !(min_learning_rate >= 0.0) || min_learning_rate > learning_rate) {
        throw std::invalid_argument("learning rates must satisfy 0 <= min <= base, base > 0");
    }
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad clip must be non-negative");
}

TrainResult train_insight(const Dataset& train, const InsightConfig& config,
                          const TrainRunConfig& run, std::vector<std::size_t> metric_order) {
    run.validate();
    train.validate();
    if (metric_order.empty()) metric_order = order_metrics(train.schema);
    auto [fit, val] = carve_validation(train, run.validation_fraction, derive_seed(run.seed, 2));
    TrainResult r;
    r.checkpoint = make_checkpoint(fit, config, std::move(metric_order), derive_seed(run.seed, 0));
    r.history = fit_surrogate(r.checkpoint, fit, val, run);
    stamp(r.checkpoint, run, r.history);
    return r;
}

TrainResult fine_tune(const SurrogateCheckpoint& start, const Dataset& train,
                      const TrainRunConfig& run) {
    run.validate();
    start.check_compatible(train);
    auto [fit, val] = carve_validation(train, run.validation_fraction, derive_seed(run.seed, 2));
    TrainResult r{start, {}};
    r.history = fit_surrogate(r.checkpoint, fit, val, run);
    stamp(r.checkpoint, run, r.history);
    return r;
}

TrainResult transfer_finetune(const SurrogateCheckpoint& source, const Dataset& target_train,
                              const TrainRunConfig& run) {
    run.validate();
    source.check_compatible(target_train);
    if (target_train.technology == source.technology) {
        throw std::invalid_argument("transfer needs a different technology than the source ('" +
                                    source.technology + "')");
    }
    auto [fit, val] =
        carve_validation(target_train, run.validation_fraction, derive_seed(run.seed, 2));
    TrainResult r{source, {}};
    r.checkpoint.technology = target_train.technology;
    r.checkpoint.stats = NormStats::fit(fit);
    r.history = fit_surrogate(r.checkpoint, fit, val, run);
    stamp(r.checkpoint, run, r.history);
    r.checkpoint.metadata["transfer_source"] = source.technology;
    return r;
}

FCTrainResult train_fc_ensemble(const Dataset& train, const FCEnsembleConfig& config,
                                const TrainRunConfig& run_in) {
    TrainRunConfig run = run_in;
    run.learning_rate = config.learning_rate;
    run.validate();
    train.validate();
    auto [fit, val] = carve_validation(train, run.validation_fraction, derive_seed(run.seed, 2));
    FCTrainResult r;
    r.ensemble = make_fc_ensemble(fit, config, derive_seed(run.seed, 0));
    const Tensor x = r.ensemble.stats.normalize_designs(fit.designs);
    const Tensor y = r.ensemble.stats.normalize_metrics(fit.metrics);
    Tensor xv, yv;
    if (val.size() > 0) {
        xv = r.ensemble.stats.normalize_designs(val.designs);
        yv = r.ensemble.stats.normalize_metrics(val.metrics);
    }
    auto mse_of = [&](const Tensor& pred) {
        return mean_squared_error(yv.values(), pred.values());
    };
    for (std::size_t m = 0; m < r.ensemble.members.size(); ++m) {
        FCNet& net = r.ensemble.members[m];
        Trainer t;
        t.params = net.parameters();
        t.rows = fit.size();
        FCNet::Cache cache;
        t.batch_step = [&](std::span<const std::size_t> rows) {
            const Tensor xb = gather_rows(x, rows);
            const Tensor yb = gather_rows(y, rows);
            const Tensor out = net.forward(xb, &cache);
            const double loss = mean_squared_error(yb.values(), out.values());
            if (std::isfinite(loss)) net.backward(cache, out, yb);
            return loss;
        };
        if (val.size() > 0) {
            t.validation_loss = [&] { return mse_of(net.forward(xv)); };
        }
        TrainHistory h = t.run(run, derive_seed(derive_seed(run.seed, 1), m));
        h.validation_rows = val.size();
        r.member_validation_mse.push_back(val.size() > 0 ? mse_of(net.forward(xv)) : kNaN);
        r.member_histories.push_back(std::move(h));
    }
    r.ensemble_validation_mse = val.size() > 0 ? mse_of(r.ensemble.predict_z(xv)) : kNaN;
    r.ensemble.metadata["train_seed"] = std::to_string(run.seed);
    r.ensemble.metadata["train_rows"] = std::to_string(fit.size());
    r.ensemble.metadata["validation_rows"] = std::to_string(val.size());
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::optional<double> r2_score(std::span<const double> truth, std::span<const double> predicted) {
    if (truth.size() != predicted.size() || truth.empty()) {
        throw std::invalid_argument("r2_score needs equal, non-empty inputs");
    }
    const double mean =
        std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_res += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    if (ss_tot == 0.0) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

double mean_squared_error(std::span<const double> truth, std::span<const double> predicted) {
    if (truth.size() != predicted.size() || truth.empty()) {
        throw std::invalid_argument("mean_squared_error needs equal, non-empty inputs");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        s += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
    }
    return s / static_cast<double>(truth.size());
}

std::string_view to_string(EvalMode mode) noexcept {
    return mode == EvalMode::TeacherForced ? "teacher-forced" : "rollout";
}

EvalMode eval_mode_from_string(std::string_view s) {
    if (s == "teacher-forced" || s == "teacher_forced") return EvalMode::TeacherForced;
    if (s == "rollout") return EvalMode::Rollout;
    throw std::invalid_argument("unknown evaluation mode '" + std::string(s) +
                                "' (expected teacher-forced or rollout)");
}

EvalReport score_predictions(const MetricSchema& schema, const NormStats& stats,
                             const Tensor& truth_z, const Tensor& predicted_z,
                             std::vector<bool> included) {
    const std::size_t m = schema.size();
    if (truth_z.shape() != predicted_z.shape() || truth_z.cols() != m || included.size() != m) {
        throw std::invalid_argument("score_predictions: shape mismatch");
    }
    if (truth_z.rows() == 0) throw std::invalid_argument("score_predictions: empty test set");
    EvalReport rep;
    rep.test_size = truth_z.rows();
    const std::size_t n = truth_z.rows();
    double r2_sum = 0.0, mse_sum = 0.0;
    std::size_t counted = 0;
    std::vector<double> t(n), p(n);
    for (std::size_t j = 0; j < m; ++j) {
        MetricScore s;
        s.name = schema.metrics[j].name;
        double mae = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            t[r] = truth_z(r, j);
            p[r] = predicted_z(r, j);
            mae += std::abs(stats.denormalize_metric(j, p[r]) - stats.denormalize_metric(j, t[r]));
        }
        s.mae = mae / static_cast<double>(n);
        s.mse = mean_squared_error(t, p);
        s.r2 = r2_score(t, p);
        s.included = included[j];
        if (!s.included) {
            s.note = "known";
        } else if (!s.r2) {
            s.included = false;
            s.note = "constant test column";
            rep.warnings.push_back("metric '" + s.name +
                                   "' is constant on the test set; R2 undefined, excluded");
        }
        if (s.included) {
            r2_sum += *s.r2;
            mse_sum += s.mse;
            ++counted;
        }
        rep.metrics.push_back(std::move(s));
    }
    rep.aggregate_r2 = counted ? r2_sum / static_cast<double>(counted) : kNaN;
    rep.aggregate_mse = counted ? mse_sum / static_cast<double>(counted) : kNaN;
    return rep;
}

Tensor predict_z(const SurrogateCheckpoint& ckpt, const Dataset& test, EvalMode mode,
                 std::size_t known_prefix_len) {
    ckpt.check_compatible(test);
    const std::size_t m = ckpt.schema.size();
    if (known_prefix_len > m) {
        throw std::invalid_argument("known prefix length " + std::to_string(known_prefix_len) +
                                    " exceeds metric count " + std::to_string(m));
    }
    const auto& order = ckpt.layout().order;
    const Tensor x = ckpt.design_matrix(test);
    const Tensor y = ckpt.target_matrix(test);
    Tensor out = Tensor::matrix(test.size(), m);
    for (std::size_t lo = 0; lo < test.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(test.size(), lo + kEvalChunk);
        const Tensor xb = slice_rows(x, lo, hi);
        const Tensor yb = slice_rows(y, lo, hi);
        Tensor pred;  // layout order
        if (mode == EvalMode::TeacherForced) {
            const Tensor heads = ckpt.model.forward(ckpt.model.teacher_tokens(xb, yb));
            pred = Tensor::matrix(hi - lo, m);
            for (std::size_t r = 0; r < heads.rows(); ++r) {
                const auto row = heads.row(r);
                pred[r] = std::accumulate(row.begin(), row.end(), 0.0) /
                          static_cast<double>(row.size());
            }
        } else {
            Tensor known;
            if (known_prefix_len > 0) {
                known = Tensor::matrix(hi - lo, known_prefix_len);
                for (std::size_t r = 0; r < hi - lo; ++r) {
                    for (std::size_t i = 0; i < known_prefix_len; ++i) known(r, i) = yb(r, i);
                }
            }
            pred = ckpt.model.rollout_batch(xb, known);
        }
        for (std::size_t r = 0; r < hi - lo; ++r) {
            for (std::size_t i = 0; i < m; ++i) out(lo + r, order[i]) = pred(r, i);
        }
    }
    return out;
}

EvalReport evaluate(const SurrogateCheckpoint& ckpt, const Dataset& test, EvalMode mode,
                    std::size_t known_prefix_len) {
    const auto start = Clock::now();
    if (mode == EvalMode::TeacherForced && known_prefix_len != 0) {
        throw std::invalid_argument("known prefix only applies to rollout evaluation");
    }
    const Tensor pred = predict_z(ckpt, test, mode, known_prefix_len);
    std::vector<bool> included(ckpt.schema.size(), true);
    for (std::size_t i = 0; i < known_prefix_len; ++i) included[ckpt.layout().order[i]] = false;
    EvalReport rep = score_predictions(ckpt.schema, ckpt.stats,
                                       ckpt.stats.normalize_metrics(test.metrics), pred, included);
    rep.model = "insight";
    rep.topology = ckpt.topology;
    rep.technology = ckpt.technology;
    rep.mode = mode;
    rep.known_prefix_len = known_prefix_len;
    if (auto it = ckpt.metadata.find("train_rows"); it != ckpt.metadata.end()) {
        rep.train_size = std::stoul(it->second);
    }
    rep.seconds = seconds_since(start);
    return rep;
}

EvalReport evaluate(const FCEnsemble& ens, const Dataset& test) {
    const auto start = Clock::now();
    if (test.topology != ens.topology || !(test.schema == ens.schema)) {
        throw std::invalid_argument("dataset does not match the ensemble's topology");
    }
    const Tensor pred = ens.predict_z(ens.stats.normalize_designs(test.designs));
    EvalReport rep = score_predictions(ens.schema, ens.stats,
                                       ens.stats.normalize_metrics(test.metrics), pred,
                                       std::vector<bool>(ens.schema.size(), true));
    rep.model = "fc_ensemble";
    rep.topology = ens.topology;
    rep.technology = ens.technology;
    rep.mode = EvalMode::Rollout;
    if (auto it = ens.metadata.find("train_rows"); it != ens.metadata.end()) {
        rep.train_size = std::stoul(it->second);
    }
    rep.seconds = seconds_since(start);
    return rep;
}

std::vector<std::size_t> order_metrics(const MetricSchema& schema) {
    const std::size_t m = schema.size();
    std::vector<std::vector<std::size_t>> dependents(m);
    std::vector<std::size_t> pending(m, 0);
    for (std::size_t j = 0; j < m; ++j) {
        for (const auto& src : schema.metrics[j].derived_from) {
            const auto k = schema.index_of(src);
            if (!k) {
                throw std::invalid_argument("metric '" + schema.metrics[j].name +
                                            "' is derived from unknown metric '" + src + "'");
            }
            if (*k == j) {
                throw std::invalid_argument("metric '" + src + "' is derived from itself");
            }
            dependents[*k].push_back(j);
            ++pending[j];
        }
    }
    using Key = std::pair<int, std::size_t>;
    std::priority_queue<Key, std::vector<Key>, std::greater<>> ready;
    auto key = [&](std::size_t j) {
        return Key{static_cast<int>(schema.metrics[j].metric_class), j};
    };
    for (std::size_t j = 0; j < m; ++j) {
        if (pending[j] == 0) ready.push(key(j));
    }
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        const std::size_t j = ready.top().second;
        ready.pop();
        order.push_back(j);
        for (std::size_t d : dependents[j]) {
            if (--pending[d] == 0) ready.push(key(d));
        }
    }
    if (order.size() != m) {
        std::string names;
        for (std::size_t j = 0; j < m; ++j) {
            if (pending[j] > 0) names += (names.empty() ? "" : ", ") + schema.metrics[j].name;
        }
        throw std::invalid_argument("metric dependency cycle among: " + names);
    }
    return order;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace

void write_history_csv(const TrainHistory& h, std::ostream& out) {
    out << "epoch,train_loss,validation_loss,learning_rate,best\n";
    for (const auto& e : h.epochs) {
        out << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.validation_loss) << ','
            << fmt(e.learning_rate) << ',' << (e.epoch == h.best_epoch ? 1 : 0) << '\n';
    }
}

std::string eval_csv_header() {
    return "model,topology,technology,mode,known_prefix_len,train_size,test_size,metric,r2,mse,"
           "mae,included";
}

void write_eval_csv_rows(const EvalReport& rep, std::ostream& out) {
    const std::string prefix = rep.model + ',' + rep.topology + ',' + rep.technology + ',' +
                               std::string(to_string(rep.mode)) + ',' +
                               std::to_string(rep.known_prefix_len) + ',' +
                               std::to_string(rep.train_size) + ',' +
                               std::to_string(rep.test_size) + ',';
    for (const auto& s : rep.metrics) {
        out << prefix << s.name << ',' << (s.r2 ? fmt(*s.r2) : "nan") << ',' << fmt(s.mse) << ','
            << fmt(s.mae) << ',' << (s.included ? 1 : 0) << '\n';
    }
    out << prefix << "aggregate," << fmt(rep.aggregate_r2) << ',' << fmt(rep.aggregate_mse)
        << ",nan,1\n";
}

void print_eval_table(const EvalReport& rep, std::ostream& out) {
    out << rep.model << " on " << rep.topology << "/" << rep.technology << " ("
        << to_string(rep.mode) << ", known prefix " << rep.known_prefix_len << ", "
        << rep.train_size << ":" << rep.test_size << ")\n";
    out << std::left << std::setw(16) << "metric" << std::right << std::setw(12) << "R2"
        << std::setw(14) << "MSE(norm)" << std::setw(14) << "MAE(raw)" << "  note\n";
    auto row = [&](const std::string& name, std::optional<double> r2, double mse,
                   std::optional<double> mae, const std::string& note) {
        std::ostringstream line;
        line << std::left << std::setw(16) << name << std::right << std::setw(12);
        if (r2) {
            line << std::fixed << std::setprecision(4) << *r2;
        } else {
            line << "n/a";
        }
        line << std::scientific << std::setprecision(3) << std::setw(14) << mse << std::setw(14);
        if (mae) {
            line << *mae;
        } else {
            line << "";
        }
        out << line.str() << "  " << note << '\n';
    };
    for (const auto& s : rep.metrics) row(s.name, s.r2, s.mse, s.mae, s.note);
    row("aggregate", rep.aggregate_r2, rep.aggregate_mse, std::nullopt, "");
    for (const auto& w : rep.warnings) out << "warning: " << w << '\n';
}

}  // namespace insight
