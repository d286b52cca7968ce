#include "insight/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "insight/grad_check.hpp"
#include "insight/seeding.hpp"
#include "json_io.hpp"

namespace insight {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

/// Population mean and standard deviation of one row of head outputs.
void head_stats(std::span<const double> row, double& mean, double& stddev) {
    double m = 0.0;
    for (double v : row) m += v;
    m /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - m) * (v - m);
    mean = m;
    stddev = std::sqrt(var / static_cast<double>(row.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void InsightConfig::validate() const {
    require(d_model > 0 && heads > 0 && d_model % heads == 0,
            "model dimension " + std::to_string(d_model) + " not divisible by " +
                std::to_string(heads) + " heads");
    require(layers > 0, "at least one decoder layer is required");
    require(ff_multiplier > 0, "feed-forward multiplier must be positive");
    require(output_heads > 0, "at least one output head is required");
    require(init_std > 0.0 && std::isfinite(init_std), "init_std must be positive");
    require(layer_norm_epsilon > 0.0, "layer-norm epsilon must be positive");
    require(dropout == 0.0, "dropout is not supported");
}

SequenceLayout SequenceLayout::identity(std::size_t n, std::size_t m) {
    SequenceLayout l{n, m, std::vector<std::size_t>(m)};
    std::iota(l.order.begin(), l.order.end(), std::size_t{0});
    return l;
}

void SequenceLayout::validate() const {
    require(num_parameters > 0 && num_metrics > 0, "layout needs N >= 1 and M >= 1");
    require(order.size() == num_metrics, "metric order length differs from M");
    std::vector<bool> seen(num_metrics, false);
    for (std::size_t i : order) {
        require(i < num_metrics && !seen[i], "metric order is not a permutation");
        seen[i] = true;
    }
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

InsightModel::InsightModel(InsightConfig config, SequenceLayout layout, std::uint64_t seed)
    : config_(config), layout_(std::move(layout)) {
    config_.validate();
    layout_.validate();
    const std::size_t d = config_.d_model;
    const double eps = config_.layer_norm_epsilon;
    std::mt19937_64 rng(seed);

    lift = Linear("lift", 1, d);
    lift.init_normal(rng, config_.init_std);
    position = Parameter("position", Tensor::matrix(layout_.max_length(), d));
    {
        std::normal_distribution<double> dist(0.0, config_.init_std);
        for (double& v : position.value.values()) v = dist(rng);
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "block" + std::to_string(l);
        TransformerBlock b{LayerNorm(p + ".ln1", d, eps),
                           CausalSelfAttention(p + ".attn", d, config_.heads),
                           LayerNorm(p + ".ln2", d, eps),
                           Linear(p + ".ff1", d, config_.ff_width()),
                           Linear(p + ".ff2", config_.ff_width(), d)};
        b.attn.init_normal(rng, config_.init_std);
        b.ff1.init_normal(rng, config_.init_std);
        b.ff2.init_normal(rng, config_.init_std);
        blocks.push_back(std::move(b));
    }
    final_norm = LayerNorm("final_norm", d, eps);
    head = Linear("head", d, config_.output_heads);
    head.init_normal(rng, config_.init_std);
}

ParameterList InsightModel::parameters() {
    ParameterList out;
    lift.collect(out);
    out.push_back(&position);
    for (auto& b : blocks) {
        b.ln1.collect(out);
        b.attn.collect(out);
        b.ln2.collect(out);
        b.ff1.collect(out);
        b.ff2.collect(out);
    }
    final_norm.collect(out);
    head.collect(out);
    return out;
}

std::vector<const Parameter*> InsightModel::parameters() const {
    auto list = const_cast<InsightModel*>(this)->parameters();
    return {list.begin(), list.end()};
}

std::size_t InsightModel::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
}

Tensor InsightModel::embed_sequence(std::span<const double> design_z,
                                    std::span<const double> prefix_z) const {
    if (design_z.size() != layout_.num_parameters) {
        throw ShapeError("design has " + std::to_string(design_z.size()) + " values, layout N = " +
                         std::to_string(layout_.num_parameters));
    }
    if (prefix_z.size() > layout_.num_metrics) {
        throw ShapeError("metric prefix longer than M");
    }
    const std::size_t k = std::min(prefix_z.size(), layout_.num_metrics - 1);
    const std::size_t t = layout_.num_parameters + k;
    const std::size_t d = config_.d_model;
    Tensor x = Tensor::matrix(t, d);
    for (std::size_t r = 0; r < t; ++r) {
        const double v = r < design_z.size() ? design_z[r] : prefix_z[r - design_z.size()];
        auto row = x.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            row[c] = v * lift.weight.value[c] + lift.bias.value[c] + position.value(r, c);
        }
    }
    return x;
}

Tensor InsightModel::teacher_tokens(const Tensor& designs_z, const Tensor& targets_z) const {
    const std::size_t n = layout_.num_parameters;
    const std::size_t m = layout_.num_metrics;
    if (designs_z.cols() != n || targets_z.cols() != m || designs_z.rows() != targets_z.rows()) {
        throw ShapeError("teacher_tokens: designs " + shape_string(designs_z.shape()) +
                         " / targets " + shape_string(targets_z.shape()) + " do not fit layout");
    }
    const std::size_t batch = designs_z.rows();
    const std::size_t t = layout_.sequence_length();
    Tensor tokens = Tensor::matrix(batch, t);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = tokens.row(b);
        std::copy_n(designs_z.row(b).begin(), n, row.begin());
        std::copy_n(targets_z.row(b).begin(), m - 1, row.begin() + static_cast<long>(n));
    }
    return tokens;
}

Tensor InsightModel::run_blocks(std::size_t first, Tensor x, std::size_t batch,
                                ForwardCache* cache) const {
    const std::size_t t = layout_.sequence_length();
    (void)batch;
    for (std::size_t l = first; l < blocks.size(); ++l) {
        const TransformerBlock& b = blocks[l];
        ForwardCache::Block* c = cache ? &cache->blocks[l] : nullptr;
        LayerNormCache* ln1c = c ? &c->ln1 : nullptr;
        Tensor a_in = b.ln1.forward(x, ln1c);
        Tensor a_out = b.attn.forward(a_in, t, c ? &c->attn : nullptr);
        Tensor mid = x;
        mid += a_out;
        Tensor f_in = b.ln2.forward(mid, c ? &c->ln2 : nullptr);
        Tensor f_pre = b.ff1.forward(f_in);
        Tensor f_act = gelu(f_pre);
        Tensor out = b.ff2.forward(f_act);
        out += mid;
        if (c) {
            c->input = std::move(x);
            c->ln1_out = std::move(a_in);
            c->mid = std::move(mid);
            c->ln2_out = std::move(f_in);
            c->ff_pre = std::move(f_pre);
            c->ff_act = std::move(f_act);
        }
        x = std::move(out);
    }
    return x;
}

Tensor InsightModel::finish(const Tensor& trunk, std::size_t batch, ForwardCache* cache) const {
    const std::size_t t = layout_.sequence_length();
    const std::size_t m = layout_.num_metrics;
    const std::size_t d = config_.d_model;
    const std::size_t first = layout_.prediction_position(0);
    Tensor gathered = Tensor::matrix(batch * m, d);
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(trunk.data() + (b * t + first) * d, m * d, gathered.data() + b * m * d);
    }
    Tensor normed = final_norm.forward(gathered, cache ? &cache->final_ln : nullptr);
    Tensor heads = head.forward(normed);
    if (cache) {
        cache->trunk = trunk;
        cache->gathered = std::move(normed);
        cache->heads = heads;
    }
    return heads;
}

Tensor InsightModel::forward(const Tensor& tokens, ForwardCache* cache) const {
    const std::size_t t = layout_.sequence_length();
    if (tokens.rank() != 2 || tokens.cols() != t) {
        throw ShapeError("forward: tokens " + shape_string(tokens.shape()) +
                         " do not match sequence length " + std::to_string(t));
    }
    const std::size_t batch = tokens.rows();
    const std::size_t d = config_.d_model;
    Tensor x = Tensor::matrix(batch * t, d);
    const double* w = lift.weight.value.data();
    const double* bias = lift.bias.value.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < t; ++s) {
            const double v = tokens(b, s);
            double* row = x.data() + (b * t + s) * d;
            const double* pos = position.value.data() + s * d;
            for (std::size_t c = 0; c < d; ++c) {
                row[c] = v * w[c] + bias[c] + pos[c];
            }
        }
    }
    if (cache) {
        cache->batch = batch;
        cache->tokens = tokens;
        cache->blocks.assign(blocks.size(), {});
    }
    Tensor trunk = run_blocks(0, std::move(x), batch, cache);
    Tensor heads = finish(trunk, batch, cache);
    if (!heads.all_finite()) {
        throw NumericError("non-finite activations in surrogate forward pass");
    }
    return heads;
}

Tensor InsightModel::forward_from(std::size_t first, const Tensor& block_input,
                                  std::size_t batch) const {
    Tensor trunk = run_blocks(first, block_input, batch, nullptr);
    return finish(trunk, batch, nullptr);
}

double InsightModel::loss(const Tensor& heads, const Tensor& targets) const {
    const std::size_t m = layout_.num_metrics;
    const std::size_t k = config_.output_heads;
    const std::size_t batch = targets.rows();
    if (targets.cols() != m || heads.rows() != batch * m || heads.cols() != k) {
        throw ShapeError("loss: heads " + shape_string(heads.shape()) + " vs targets " +
                         shape_string(targets.shape()));
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < batch * m; ++r) {
        const double y = targets[r];
        for (std::size_t h = 0; h < k; ++h) {
            const double e = heads(r, h) - y;
            acc += e * e;
        }
    }
    return acc / static_cast<double>(batch * m * k);
}

void InsightModel::backward(const ForwardCache& cache, const Tensor& targets) {
    const std::size_t batch = cache.batch;
    const std::size_t t = layout_.sequence_length();
    const std::size_t m = layout_.num_metrics;
    const std::size_t k = config_.output_heads;
    const std::size_t d = config_.d_model;

    Tensor dheads(cache.heads.shape());
    const double scale = 2.0 / static_cast<double>(batch * m * k);
    for (std::size_t r = 0; r < batch * m; ++r) {
        for (std::size_t h = 0; h < k; ++h) {
            dheads(r, h) = scale * (cache.heads(r, h) - targets[r]);
        }
    }
    Tensor dnormed = head.backward(cache.gathered, dheads);
    Tensor dgathered = final_norm.backward(cache.final_ln, dnormed);

    Tensor dx = Tensor::matrix(batch * t, d);
    const std::size_t first = layout_.prediction_position(0);
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(dgathered.data() + b * m * d, m * d, dx.data() + (b * t + first) * d);
    }

    for (std::size_t l = blocks.size(); l-- > 0;) {
        TransformerBlock& b = blocks[l];
        const ForwardCache::Block& c = cache.blocks[l];
        // out = mid + ff2(gelu(ff1(ln2(mid))))
        Tensor dact = b.ff2.backward(c.ff_act, dx);
        Tensor dpre = gelu_backward(c.ff_pre, dact);
        Tensor dfin = b.ff1.backward(c.ln2_out, dpre);
        Tensor dmid = b.ln2.backward(c.ln2, dfin);
        dmid += dx;
        // mid = input + attn(ln1(input))
        Tensor dain = b.attn.backward(c.attn, t, dmid);
        Tensor dinput = b.ln1.backward(c.ln1, dain);
        dinput += dmid;
        dx = std::move(dinput);
    }

    double* gw = lift.weight.grad.data();
    double* gb = lift.bias.grad.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < t; ++s) {
            const double v = cache.tokens(b, s);
            const double* row = dx.data() + (b * t + s) * d;
            double* gpos = position.grad.data() + s * d;
            for (std::size_t c = 0; c < d; ++c) {
                gw[c] += v * row[c];
                gb[c] += row[c];
                gpos[c] += row[c];
            }
        }
    }
}

TeacherForcedOutput InsightModel::teacher_forced(std::span<const double> design_z,
                                                 std::span<const double> target_z) const {
    const std::size_t n = layout_.num_parameters;
    const std::size_t m = layout_.num_metrics;
    if (design_z.size() != n || target_z.size() != m) {
        throw ShapeError("teacher_forced: input lengths do not match layout");
    }
    Tensor tokens = Tensor::matrix(1, layout_.sequence_length());
    std::copy(design_z.begin(), design_z.end(), tokens.data());
    std::copy_n(target_z.begin(), m - 1, tokens.data() + n);
    const Tensor heads = forward(tokens);
    TeacherForcedOutput out;
    out.predictions.resize(m);
    double sd = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        head_stats(heads.row(i), out.predictions[i], sd);
    }
    Tensor targets({1, m}, std::vector<double>(target_z.begin(), target_z.end()));
    out.loss = loss(heads, targets);
    return out;
}

UncertainOutput InsightModel::decode(std::span<const double> design_z,
                                     std::span<const double> known_z, bool want_spread) const {
    const std::size_t n = layout_.num_parameters;
    const std::size_t m = layout_.num_metrics;
    if (design_z.size() != n) {
        throw ShapeError("rollout: design length does not match layout");
    }
    if (known_z.size() > m) {
        throw ShapeError("rollout: known prefix longer than M");
    }
    if (want_spread && config_.output_heads < 2) {
        throw std::invalid_argument("uncertainty needs at least two output heads");
    }
    UncertainOutput out{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
    Tensor tokens = Tensor::matrix(1, layout_.sequence_length());
    std::copy(design_z.begin(), design_z.end(), tokens.data());
    for (std::size_t i = 0; i < m; ++i) {
        if (i < known_z.size()) {
            out.mean[i] = known_z[i];
        } else {
            const Tensor heads = forward(tokens);
            head_stats(heads.row(i), out.mean[i], out.stddev[i]);
        }
        if (i + 1 < m) {
            tokens[n + i] = out.mean[i];
        }
    }
    return out;
}

std::vector<double> InsightModel::rollout(std::span<const double> design_z,
                                          std::span<const double> known_z) const {
    return decode(design_z, known_z, false).mean;
}

UncertainOutput InsightModel::rollout_with_uncertainty(std::span<const double> design_z,
                                                       std::span<const double> known_z) const {
    return decode(design_z, known_z, true);
}

Tensor InsightModel::rollout_batch(const Tensor& designs_z, const Tensor& known_z,
                                   Tensor* stddev) const {
    const std::size_t n = layout_.num_parameters;
    const std::size_t m = layout_.num_metrics;
    const std::size_t batch = designs_z.rows();
    const std::size_t k = known_z.empty() ? 0 : known_z.cols();
    if (designs_z.cols() != n || (k > 0 && known_z.rows() != batch) || k > m) {
        throw ShapeError("rollout_batch: designs " + shape_string(designs_z.shape()) +
                         " / known " + shape_string(known_z.shape()) + " do not fit layout");
    }
    Tensor means = Tensor::matrix(batch, m);
    if (stddev) {
        *stddev = Tensor::matrix(batch, m);
    }
    Tensor tokens = Tensor::matrix(batch, layout_.sequence_length());
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(designs_z.row(b).begin(), n, tokens.row(b).begin());
        for (std::size_t i = 0; i < k; ++i) {
            means(b, i) = known_z(b, i);
            if (i + 1 < m) tokens(b, n + i) = known_z(b, i);
        }
    }
    for (std::size_t i = k; i < m; ++i) {
        const Tensor heads = forward(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
            double mean = 0.0, sd = 0.0;
            head_stats(heads.row(b * m + i), mean, sd);
            means(b, i) = mean;
            if (stddev) (*stddev)(b, i) = sd;
            if (i + 1 < m) tokens(b, n + i) = mean;
        }
    }
    return means;
}

GradCheckReport grad_check_model(InsightModel& model, const Tensor& tokens, const Tensor& targets,
                                 const GradCheckOptions& options) {
    ForwardCache base;
    (void)model.forward(tokens, &base);
    const std::size_t batch = tokens.rows();
    auto accumulate = [&] {
        ForwardCache c;
        (void)model.forward(tokens, &c);
        model.backward(c, targets);
    };

    // Each group restarts the forward pass at the first stage it affects.
    std::vector<std::pair<ParameterList, std::function<double()>>> groups;
    {
        ParameterList g;
        model.lift.collect(g);
        g.push_back(&model.position);
        groups.emplace_back(g, [&] { return model.loss(model.forward(tokens), targets); });
    }
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        ParameterList g;
        auto& b = model.blocks[l];
        b.ln1.collect(g);
        b.attn.collect(g);
        b.ln2.collect(g);
        b.ff1.collect(g);
        b.ff2.collect(g);
        groups.emplace_back(g, [&, l] {
            return model.loss(model.forward_from(l, base.blocks[l].input, batch), targets);
        });
    }
    {
        ParameterList g;
        model.final_norm.collect(g);
        model.head.collect(g);
        groups.emplace_back(g, [&] {
            return model.loss(model.forward_from(model.blocks.size(), base.trunk, batch), targets);
        });
    }

    GradCheckReport total;
    total.tolerance = options.tolerance;
    for (auto& [params, loss] : groups) {
        const GradCheckReport r = grad_check(loss, accumulate, params, options);
        total.blocks.insert(total.blocks.end(), r.blocks.begin(), r.blocks.end());
        total.max_relative_error = std::max(total.max_relative_error, r.max_relative_error);
        total.entries += r.entries;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Checkpoint wrapper
// ---------------------------------------------------------------------------

std::vector<double> SurrogateCheckpoint::targets_z(const PerformanceVector& perf) const {
    const auto& order = layout().order;
    std::vector<double> z(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        z[i] = stats.normalize_metric(order[i], perf.values.at(order[i]));
    }
    return z;
}

namespace {

std::vector<double> known_to_z(const SurrogateCheckpoint& c, std::span<const double> known) {
    const auto& order = c.layout().order;
    if (known.size() > order.size()) {
        throw ShapeError("known prefix longer than M");
    }
    std::vector<double> z(known.size());
    for (std::size_t i = 0; i < known.size(); ++i) {
        z[i] = c.stats.normalize_metric(order[i], known[i]);
    }
    return z;
}

}  // namespace

PerformanceVector SurrogateCheckpoint::rollout(const DesignPoint& design,
                                               std::span<const double> known_prefix) const {
    const auto xz = stats.normalize_design(design);
    const auto kz = known_to_z(*this, known_prefix);
    const auto slots = model.rollout(xz, kz);
    const auto& order = layout().order;
    PerformanceVector out;
    out.values.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.values[order[i]] =
            i < known_prefix.size() ? known_prefix[i] : stats.denormalize_metric(order[i], slots[i]);
    }
    return out;
}

SurrogateCheckpoint::Uncertain SurrogateCheckpoint::rollout_with_uncertainty(
    const DesignPoint& design, std::span<const double> known_prefix) const {
    const auto xz = stats.normalize_design(design);
    const auto kz = known_to_z(*this, known_prefix);
    const auto slots = model.rollout_with_uncertainty(xz, kz);
    const auto& order = layout().order;
    Uncertain out;
    out.mean.values.resize(order.size());
    out.mean_z.resize(order.size());
    out.std_z.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t s = order[i];
        out.mean_z[s] = slots.mean[i];
        out.std_z[s] = slots.stddev[i];
        out.mean.values[s] =
            i < known_prefix.size() ? known_prefix[i] : stats.denormalize_metric(s, slots.mean[i]);
    }
    return out;
}

std::pair<PerformanceVector, double> SurrogateCheckpoint::teacher_forced(
    const DesignPoint& design, const PerformanceVector& target) const {
    const auto out = model.teacher_forced(stats.normalize_design(design), targets_z(target));
    const auto& order = layout().order;
    PerformanceVector pred;
    pred.values.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        pred.values[order[i]] = stats.denormalize_metric(order[i], out.predictions[i]);
    }
    return {pred, out.loss};
}

Tensor SurrogateCheckpoint::design_matrix(const Dataset& data) const {
    return stats.normalize_designs(data.designs);
}

Tensor SurrogateCheckpoint::target_matrix(const Dataset& data) const {
    const Tensor z = stats.normalize_metrics(data.metrics);
    const auto& order = layout().order;
    Tensor out = Tensor::matrix(z.rows(), order.size());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            out(r, i) = z(r, order[i]);
        }
    }
    return out;
}

void SurrogateCheckpoint::check_compatible(const Dataset& data) const {
    require(data.topology == topology, "dataset topology '" + data.topology +
                                           "' does not match checkpoint topology '" + topology + "'");
    require(data.schema == schema, "dataset schema does not match checkpoint schema");
    require(data.num_parameters() == layout().num_parameters,
            "dataset parameter count does not match checkpoint layout");
}

SurrogateCheckpoint make_checkpoint(const Dataset& train, const InsightConfig& config,
                                    std::vector<std::size_t> metric_order, std::uint64_t seed) {
    SurrogateCheckpoint c;
    c.topology = train.topology;
    c.technology = train.technology;
    c.parameters = train.parameters;
    c.schema = train.schema;
    c.stats = NormStats::fit(train);
    c.model = InsightModel(
        config, SequenceLayout{train.num_parameters(), train.num_metrics(), std::move(metric_order)},
        seed);
    return c;
}

// ---------------------------------------------------------------------------
// Binary container: magic, version, JSON block, little-endian float64 blobs
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'I', 'N', 'S', 'I', 'G', 'H', 'T', '\0'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw std::runtime_error("checkpoint truncated");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& out, std::span<const double> values) {
    for (double v : values) {
        write_u64(out, std::bit_cast<std::uint64_t>(v));
    }
}

void read_f64(std::istream& in, std::span<double> values) {
    for (double& v : values) {
        v = std::bit_cast<double>(read_u64(in));
    }
}

detail::json stats_json(const NormStats& s) {
    return detail::json{{"x_mean", s.x_mean}, {"x_std", s.x_std}, {"y_mean", s.y_mean},
                        {"y_std", s.y_std},   {"y_log", s.y_log}};
}

NormStats stats_from_json(const detail::json& j) {
    NormStats s;
    s.x_mean = j.at("x_mean").get<std::vector<double>>();
    s.x_std = j.at("x_std").get<std::vector<double>>();
    s.y_mean = j.at("y_mean").get<std::vector<double>>();
    s.y_std = j.at("y_std").get<std::vector<double>>();
    s.y_log = j.at("y_log").get<std::vector<bool>>();
    return s;
}

detail::json manifest_for(const std::vector<const Parameter*>& params) {
    detail::json manifest = detail::json::array();
    std::size_t offset = 0;
    for (const Parameter* p : params) {
        manifest.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
        offset += p->value.size() * sizeof(double);
    }
    return manifest;
}

void write_container(std::ostream& out, detail::json header,
                     const std::vector<const Parameter*>& params, std::uint32_t version) {
    header["format_version"] = version;
    header["manifest"] = manifest_for(params);
    const std::string text = header.dump();
    out.write(kMagic, sizeof kMagic);
    write_u64(out, version);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Parameter* p : params) {
        write_f64(out, p->value.values());
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint");
    }
}

detail::json read_header(std::istream& in, std::uint32_t version, const std::string& kind) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic)");
    }
    const std::uint64_t v = read_u64(in);
    if (v != version) {
        throw std::runtime_error("unsupported checkpoint format version " + std::to_string(v));
    }
    const std::uint64_t len = read_u64(in);
    if (len > (1ULL << 30)) {
        throw std::runtime_error("checkpoint header too large");
    }
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
        throw std::runtime_error("checkpoint truncated in header");
    }
    auto header = detail::json::parse(text);
    if (header.at("kind").get<std::string>() != kind) {
        throw std::runtime_error("checkpoint holds a '" + header.at("kind").get<std::string>() +
                                 "', expected '" + kind + "'");
    }
    return header;
}

void read_blobs(std::istream& in, const detail::json& manifest, const ParameterList& params) {
    if (manifest.size() != params.size()) {
        throw std::runtime_error("checkpoint manifest has " + std::to_string(manifest.size()) +
                                 " tensors, model expects " + std::to_string(params.size()));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        const auto& entry = manifest[i];
        if (entry.at("name").get<std::string>() != p.name ||
            entry.at("shape").get<Shape>() != p.value.shape() ||
            entry.at("offset").get<std::size_t>() != offset) {
            throw std::runtime_error("checkpoint manifest entry " + std::to_string(i) +
                                     " does not match tensor '" + p.name + "'");
        }
        read_f64(in, p.value.values());
        offset += p.value.size() * sizeof(double);
    }
}

detail::json identity_json(const std::string& kind, const std::string& topology,
                           const std::string& technology,
                           const std::vector<ParameterSpec>& parameters,
                           const MetricSchema& schema, const NormStats& stats,
                           const std::map<std::string, std::string>& metadata) {
    return detail::json{{"kind", kind},
                        {"topology", topology},
                        {"technology", technology},
                        {"parameters", detail::to_json(parameters)},
                        {"schema", detail::to_json(schema)},
                        {"stats", stats_json(stats)},
                        {"metadata", metadata}};
}

template <typename T>
void read_identity(const detail::json& h, T& target) {
    target.topology = h.at("topology").get<std::string>();
    target.technology = h.at("technology").get<std::string>();
    target.parameters = detail::parameters_from_json(h.at("parameters"));
    target.schema = detail::schema_from_json(h.at("schema"));
    target.stats = stats_from_json(h.at("stats"));
    target.metadata = h.at("metadata").get<std::map<std::string, std::string>>();
}

}  // namespace

void save_checkpoint(const SurrogateCheckpoint& c, std::ostream& out) {
    const InsightConfig& cfg = c.model.config();
    const SequenceLayout& layout = c.layout();
    detail::json header = identity_json("insight", c.topology, c.technology, c.parameters,
                                        c.schema, c.stats, c.metadata);
    header["config"] = {{"d_model", cfg.d_model},
                        {"heads", cfg.heads},
                        {"layers", cfg.layers},
                        {"ff_multiplier", cfg.ff_multiplier},
                        {"output_heads", cfg.output_heads},
                        {"init_std", cfg.init_std},
                        {"layer_norm_epsilon", cfg.layer_norm_epsilon},
                        {"dropout", cfg.dropout},
                        {"activation", "gelu_tanh"}};
    header["layout"] = {{"num_parameters", layout.num_parameters},
                        {"num_metrics", layout.num_metrics},
                        {"order", layout.order}};
    write_container(out, std::move(header), c.model.parameters(), SurrogateCheckpoint::kFormatVersion);
}

void save_checkpoint(const SurrogateCheckpoint& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    save_checkpoint(c, out);
}

SurrogateCheckpoint load_checkpoint(std::istream& in) {
    const auto h = read_header(in, SurrogateCheckpoint::kFormatVersion, "insight");
    SurrogateCheckpoint c;
    read_identity(h, c);
    const auto& jc = h.at("config");
    InsightConfig cfg;
    cfg.d_model = jc.at("d_model").get<std::size_t>();
    cfg.heads = jc.at("heads").get<std::size_t>();
    cfg.layers = jc.at("layers").get<std::size_t>();
    cfg.ff_multiplier = jc.at("ff_multiplier").get<std::size_t>();
    cfg.output_heads = jc.at("output_heads").get<std::size_t>();
    cfg.init_std = jc.at("init_std").get<double>();
    cfg.layer_norm_epsilon = jc.at("layer_norm_epsilon").get<double>();
    cfg.dropout = jc.at("dropout").get<double>();
    const auto& jl = h.at("layout");
    SequenceLayout layout{jl.at("num_parameters").get<std::size_t>(),
                          jl.at("num_metrics").get<std::size_t>(),
                          jl.at("order").get<std::vector<std::size_t>>()};
    c.model = InsightModel(cfg, layout, 0);
    read_blobs(in, h.at("manifest"), c.model.parameters());
    return c;
}

SurrogateCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint '" + path + "'");
    }
    return load_checkpoint(in);
}

// ---------------------------------------------------------------------------
// FC ensemble
// ---------------------------------------------------------------------------

FCNet::FCNet(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs,
             std::uint64_t seed, std::string name) {
    std::mt19937_64 rng(seed);
    std::size_t in = inputs;
    for (std::size_t i = 0; i <= hidden.size(); ++i) {
        const std::size_t out = i < hidden.size() ? hidden[i] : outputs;
        Linear layer(name + ".layer" + std::to_string(i), in, out);
        layer.init_normal(rng, std::sqrt(2.0 / static_cast<double>(in)));
        layers.push_back(std::move(layer));
        in = out;
    }
}

Tensor FCNet::forward(const Tensor& x, Cache* cache) const {
    if (cache) cache->inputs.clear();
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (cache) cache->inputs.push_back(h);
        h = layers[i].forward(h);
        if (i + 1 < layers.size()) {
            for (double& v : h.values()) v = v > 0.0 ? v : 0.0;
        }
    }
    return h;
}

void FCNet::backward(const Cache& cache, const Tensor& output, const Tensor& targets) {
    Tensor d(output.shape());
    const double scale = 2.0 / static_cast<double>(output.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = scale * (output[i] - targets[i]);
    for (std::size_t i = layers.size(); i-- > 0;) {
        d = layers[i].backward(cache.inputs[i], d);
        if (i > 0) {
            // ReLU output is positive exactly where its pre-activation was.
            d = relu_backward(cache.inputs[i], d);
        }
    }
}

ParameterList FCNet::parameters() {
    ParameterList out;
    for (auto& l : layers) l.collect(out);
    return out;
}

std::vector<const Parameter*> FCNet::parameters() const {
    auto list = const_cast<FCNet*>(this)->parameters();
    return {list.begin(), list.end()};
}

Tensor FCEnsemble::predict_z(const Tensor& designs_z, Tensor* stddev) const {
    if (members.empty()) {
        throw std::invalid_argument("empty ensemble");
    }
    const std::size_t m = schema.size();
    const std::size_t batch = designs_z.rows();
    Tensor sum = Tensor::matrix(batch, m);
    Tensor sq = Tensor::matrix(batch, m);
    std::vector<Tensor> outs;
    for (const auto& net : members) {
        outs.push_back(net.forward(designs_z));
        sum += outs.back();
    }
    sum *= 1.0 / static_cast<double>(members.size());
    if (stddev) {
        for (const auto& o : outs) {
            for (std::size_t i = 0; i < o.size(); ++i) {
                const double e = o[i] - sum[i];
                sq[i] += e * e;
            }
        }
        for (double& v : sq.values()) v = std::sqrt(v / static_cast<double>(members.size()));
        *stddev = std::move(sq);
    }
    return sum;
}

EnsemblePrediction FCEnsemble::predict(const DesignPoint& design) const {
    const auto z = stats.normalize_design(design);
    Tensor x({1, z.size()}, z);
    Tensor sd;
    const Tensor mean = predict_z(x, &sd);
    EnsemblePrediction p;
    p.mean_z.assign(mean.values().begin(), mean.values().end());
    p.std_z.assign(sd.values().begin(), sd.values().end());
    p.mean = stats.denormalize_performance(p.mean_z);
    return p;
}

FCEnsemble make_fc_ensemble(const Dataset& train, const FCEnsembleConfig& config,
                            std::uint64_t seed) {
    require(config.members >= 1, "ensemble needs at least one member");
    FCEnsemble e;
    e.topology = train.topology;
    e.technology = train.technology;
    e.parameters = train.parameters;
    e.schema = train.schema;
    e.stats = NormStats::fit(train);
    e.config = config;
    for (std::size_t i = 0; i < config.members; ++i) {
        e.members.emplace_back(train.num_parameters(), config.hidden, train.num_metrics(),
                               derive_seed(seed, i), "member" + std::to_string(i));
    }
    return e;
}

void save_fc_ensemble(const FCEnsemble& e, std::ostream& out) {
    detail::json header = identity_json("fc_ensemble", e.topology, e.technology, e.parameters,
                                        e.schema, e.stats, e.metadata);
    header["config"] = {{"hidden", e.config.hidden},
                        {"members", e.config.members},
                        {"learning_rate", e.config.learning_rate},
                        {"activation", "relu"}};
    std::vector<const Parameter*> params;
    for (const auto& m : e.members) {
        const auto p = m.parameters();
        params.insert(params.end(), p.begin(), p.end());
    }
    write_container(out, std::move(header), params, SurrogateCheckpoint::kFormatVersion);
}

void save_fc_ensemble(const FCEnsemble& e, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    save_fc_ensemble(e, out);
}

FCEnsemble load_fc_ensemble(std::istream& in) {
    const auto h = read_header(in, SurrogateCheckpoint::kFormatVersion, "fc_ensemble");
    FCEnsemble e;
    read_identity(h, e);
    const auto& jc = h.at("config");
    e.config.hidden = jc.at("hidden").get<std::vector<std::size_t>>();
    e.config.members = jc.at("members").get<std::size_t>();
    e.config.learning_rate = jc.at("learning_rate").get<double>();
    ParameterList params;
    for (std::size_t i = 0; i < e.config.members; ++i) {
        e.members.emplace_back(e.parameters.size(), e.config.hidden, e.schema.size(), 0,
                               "member" + std::to_string(i));
    }
    for (auto& m : e.members) {
        const auto p = m.parameters();
        params.insert(params.end(), p.begin(), p.end());
    }
    read_blobs(in, h.at("manifest"), params);
    return e;
}

FCEnsemble load_fc_ensemble(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open ensemble '" + path + "'");
    }
    return load_fc_ensemble(in);
}

}  // namespace insight
