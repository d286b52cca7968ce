#include "insight/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "json_io.hpp"

namespace insight {

namespace {

constexpr const char* kMagic = "# insight-dataset 1";

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s, std::size_t line) {
    const char* begin = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0') {
        throw DataError("dataset line " + std::to_string(line) + ": bad number '" + s + "'");
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

double population_std(const std::vector<double>& col, double mean) {
    double acc = 0.0;
    for (double v : col) {
        acc += (v - mean) * (v - mean);
    }
    return std::sqrt(acc / static_cast<double>(col.size()));
}

void fit_column(const std::vector<double>& col, const std::string& what, double& mean,
                double& stddev) {
    mean = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
    stddev = population_std(col, mean);
    if (!(stddev > 1e-12 * std::max(1.0, std::abs(mean)))) {
        throw DataError("column '" + what + "' is constant on the training split");
    }
}

}  // namespace

DesignPoint Dataset::design(std::size_t row) const {
    const auto r = designs.row(row);
    return DesignPoint{{r.begin(), r.end()}};
}

PerformanceVector Dataset::performance(std::size_t row) const {
    const auto r = metrics.row(row);
    return PerformanceVector{{r.begin(), r.end()}};
}

void Dataset::validate() const {
    if (designs.rank() != 2 || metrics.rank() != 2) {
        throw DataError("dataset matrices must be rank 2");
    }
    if (designs.shape()[1] != parameters.size() || metrics.shape()[1] != schema.size()) {
        throw DataError("dataset columns do not match parameter/metric counts");
    }
    if (designs.shape()[0] != metrics.shape()[0]) {
        throw DataError("dataset design and metric row counts differ");
    }
    if (!designs.all_finite() || !metrics.all_finite()) {
        throw DataError("dataset contains non-finite entries");
    }
}

Dataset empty_dataset(const CircuitTopology& topology, std::string technology,
                      std::uint64_t seed) {
    Dataset d;
    d.topology = topology.name;
    d.technology = std::move(technology);
    d.parameters = topology.parameters;
    d.schema = topology.schema;
    d.seed = seed;
    d.designs = Tensor({0, topology.num_parameters()});
    d.metrics = Tensor({0, topology.num_metrics()});
    return d;
}

std::vector<DesignPoint> sample_designs(const CircuitTopology& topology, std::size_t n,
                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DesignPoint> out(n);
    for (auto& d : out) {
        d.values.reserve(topology.num_parameters());
        for (const auto& p : topology.parameters) {
            std::normal_distribution<double> dist(p.midpoint(), 0.25 * p.range());
            double v = dist(rng);
            while (v < p.lower || v > p.upper) {
                v = dist(rng);
            }
            d.values.push_back(v);
        }
    }
    return out;
}

Dataset build_dataset(std::string_view topology_name, std::string_view technology_name,
                      std::size_t n, std::uint64_t seed, unsigned threads) {
    const CircuitTopology& topo = topology(topology_name);
    const TechnologyProfile& tech = technology(technology_name);
    Dataset data = empty_dataset(topo, tech.name, seed);
    const auto designs = sample_designs(topo, n, seed);
    const std::size_t N = topo.num_parameters();
    const std::size_t M = topo.num_metrics();
    data.designs = Tensor({n, N});
    data.metrics = Tensor({n, M});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(designs[i].values.begin(), designs[i].values.end(), data.designs.row(i).begin());
    }

    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));

    // Each worker writes a disjoint row range, so the result matches serial order.
    std::vector<std::exception_ptr> errors(threads);
    auto work = [&](unsigned w) {
        try {
            for (std::size_t i = w; i < n; i += threads) {
                const auto perf = evaluate_oracle(topo, tech, designs[i]);
                std::copy(perf.values.begin(), perf.values.end(), data.metrics.row(i).begin());
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back(work, w);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return data;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
    Dataset out = data;
    const std::size_t N = data.num_parameters();
    const std::size_t M = data.num_metrics();
    out.designs = Tensor({indices.size(), N});
    out.metrics = Tensor({indices.size(), M});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= data.size()) {
            throw DataError("subset index out of range");
        }
        const auto dx = data.designs.row(indices[r]);
        const auto dy = data.metrics.row(indices[r]);
        std::copy(dx.begin(), dx.end(), out.designs.row(r).begin());
        std::copy(dy.begin(), dy.end(), out.metrics.row(r).begin());
    }
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t n_train, std::size_t n_test,
                                  std::uint64_t seed) {
    if (n_train + n_test > data.size()) {
        throw DataError("split of " + std::to_string(n_train) + ":" + std::to_string(n_test) +
                        " exceeds dataset size " + std::to_string(data.size()));
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<long>(n_train));
    std::vector<std::size_t> test(order.begin() + static_cast<long>(n_train),
                                  order.begin() + static_cast<long>(n_train + n_test));
    return {subset(data, train), subset(data, test)};
}

std::pair<Dataset, Dataset> split_fraction(const Dataset& data, double train_fraction,
                                           std::uint64_t seed) {
    if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
        throw DataError("train fraction must lie in [0, 1]");
    }
    const auto n_train =
        static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
    return split(data, n_train, data.size() - n_train, seed);
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& data, std::ostream& out) {
    data.validate();
    detail::json header{{"topology", data.topology},
                        {"technology", data.technology},
                        {"seed", data.seed},
                        {"rows", data.size()},
                        {"parameters", detail::to_json(data.parameters)},
                        {"schema", detail::to_json(data.schema)},
                        {"metadata", data.metadata}};
    out << kMagic << '\n' << "# " << header.dump() << '\n';
    const std::size_t N = data.num_parameters();
    const std::size_t M = data.num_metrics();
    for (std::size_t j = 0; j < N; ++j) {
        out << (j ? "," : "") << "x_" << j + 1;
    }
    for (std::size_t j = 0; j < M; ++j) {
        out << (N + j ? "," : "") << "y_" << j + 1;
    }
    out << '\n';
    for (std::size_t r = 0; r < data.size(); ++r) {
        bool first = true;
        for (double v : data.designs.row(r)) {
            out << (first ? "" : ",") << format_double(v);
            first = false;
        }
        for (double v : data.metrics.row(r)) {
            out << (first ? "" : ",") << format_double(v);
            first = false;
        }
        out << '\n';
    }
    if (!out) {
        throw DataError("failed writing dataset");
    }
}

void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open '" + path + "' for writing");
    }
    save_dataset(data, out);
}

Dataset load_dataset(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw DataError("not an insight dataset file (missing magic line)");
    }
    if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
        throw DataError("dataset header block missing");
    }
    Dataset data;
    std::size_t rows = 0;
    try {
        const auto header = detail::json::parse(line.substr(2));
        data.topology = header.at("topology").get<std::string>();
        data.technology = header.at("technology").get<std::string>();
        data.seed = header.at("seed").get<std::uint64_t>();
        rows = header.at("rows").get<std::size_t>();
        data.parameters = detail::parameters_from_json(header.at("parameters"));
        data.schema = detail::schema_from_json(header.at("schema"));
        data.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    } catch (const detail::json::exception& e) {
        throw DataError(std::string("dataset header: ") + e.what());
    }
    const std::size_t N = data.parameters.size();
    const std::size_t M = data.schema.size();

    if (!std::getline(in, line)) {
        throw DataError("dataset column header missing");
    }
    const auto names = split_csv(line);
    if (names.size() != N + M) {
        throw DataError("dataset column header has wrong width");
    }
    for (std::size_t j = 0; j < N + M; ++j) {
        const std::string expected = j < N ? "x_" + std::to_string(j + 1)
                                           : "y_" + std::to_string(j - N + 1);
        if (names[j] != expected) {
            throw DataError("dataset column " + std::to_string(j) + " is '" + names[j] +
                            "', expected '" + expected + "'");
        }
    }

    data.designs = Tensor({rows, N});
    data.metrics = Tensor({rows, M});
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) {
            throw DataError("dataset truncated at row " + std::to_string(r));
        }
        const auto cells = split_csv(line);
        if (cells.size() != N + M) {
            throw DataError("dataset row " + std::to_string(r) + " has wrong width");
        }
        for (std::size_t j = 0; j < N; ++j) {
            data.designs(r, j) = parse_double(cells[j], r + 4);
        }
        for (std::size_t j = 0; j < M; ++j) {
            data.metrics(r, j) = parse_double(cells[N + j], r + 4);
        }
    }
    while (std::getline(in, line)) {
        if (!line.empty()) {
            throw DataError("dataset has more rows than its header declares");
        }
    }
    data.validate();
    return data;
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path + "'");
    }
    return load_dataset(in);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

NormStats NormStats::fit(const Dataset& train) {
    if (train.size() == 0) {
        throw DataError("cannot fit normalization on an empty dataset");
    }
    NormStats s;
    const std::size_t n = train.size();
    const std::size_t N = train.num_parameters();
    const std::size_t M = train.num_metrics();
    s.x_mean.resize(N);
    s.x_std.resize(N);
    s.y_mean.resize(M);
    s.y_std.resize(M);
    s.y_log = train.schema.log_flags();
    std::vector<double> col(n);
    for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t r = 0; r < n; ++r) col[r] = train.designs(r, j);
        fit_column(col, train.parameters[j].name, s.x_mean[j], s.x_std[j]);
    }
    for (std::size_t j = 0; j < M; ++j) {
        for (std::size_t r = 0; r < n; ++r) {
            const double v = train.metrics(r, j);
            if (s.y_log[j]) {
                if (!(v > 0.0)) {
                    throw DataError("non-positive value under log-scaled metric '" +
                                    train.schema.metrics[j].name + "'");
                }
                col[r] = std::log10(v);
            } else {
                col[r] = v;
            }
        }
        fit_column(col, train.schema.metrics[j].name, s.y_mean[j], s.y_std[j]);
    }
    return s;
}

double NormStats::normalize_metric(std::size_t m, double v) const {
    if (y_log[m]) {
        if (!(v > 0.0)) {
            throw DataError("non-positive value under log-scaled metric " + std::to_string(m));
        }
        v = std::log10(v);
    }
    return (v - y_mean[m]) / y_std[m];
}

double NormStats::denormalize_metric(std::size_t m, double z) const {
    const double v = z * y_std[m] + y_mean[m];
    return y_log[m] ? std::pow(10.0, v) : v;
}

Tensor NormStats::normalize_designs(const Tensor& designs) const {
    if (designs.cols() != x_mean.size()) throw ShapeError("design width mismatch");
    Tensor z = designs;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t j = 0; j < z.cols(); ++j) {
            z(r, j) = (z(r, j) - x_mean[j]) / x_std[j];
        }
    }
    return z;
}

Tensor NormStats::denormalize_designs(const Tensor& z) const {
    if (z.cols() != x_mean.size()) throw ShapeError("design width mismatch");
    Tensor x = z;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            x(r, j) = x(r, j) * x_std[j] + x_mean[j];
        }
    }
    return x;
}

Tensor NormStats::normalize_metrics(const Tensor& metrics) const {
    if (metrics.cols() != y_mean.size()) throw ShapeError("metric width mismatch");
    Tensor z = metrics;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t j = 0; j < z.cols(); ++j) {
            z(r, j) = normalize_metric(j, z(r, j));
        }
    }
    return z;
}

Tensor NormStats::denormalize_metrics(const Tensor& z) const {
    if (z.cols() != y_mean.size()) throw ShapeError("metric width mismatch");
    Tensor y = z;
    for (std::size_t r = 0; r < y.rows(); ++r) {
        for (std::size_t j = 0; j < y.cols(); ++j) {
            y(r, j) = denormalize_metric(j, y(r, j));
        }
    }
    return y;
}

std::vector<double> NormStats::normalize_design(const DesignPoint& d) const {
    if (d.values.size() != x_mean.size()) throw ShapeError("design width mismatch");
    std::vector<double> z(d.values.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        z[j] = (d.values[j] - x_mean[j]) / x_std[j];
    }
    return z;
}

std::vector<double> NormStats::normalize_performance(const PerformanceVector& p) const {
    if (p.values.size() != y_mean.size()) throw ShapeError("metric width mismatch");
    std::vector<double> z(p.values.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        z[j] = normalize_metric(j, p.values[j]);
    }
    return z;
}

PerformanceVector NormStats::denormalize_performance(std::span<const double> z) const {
    if (z.size() != y_mean.size()) throw ShapeError("metric width mismatch");
    PerformanceVector p;
    p.values.resize(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        p.values[j] = denormalize_metric(j, z[j]);
    }
    return p;
}

}  // namespace insight
