#include "insight/circuits.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace insight {

namespace {

std::atomic<std::uint64_t> g_oracle_calls{0};

constexpr double kPi = std::numbers::pi;
constexpr double kMicro = 1e-6;
constexpr double kPico = 1e-12;
constexpr double kFemto = 1e-15;

double rad_to_deg(double r) { return r * 180.0 / kPi; }

/// Square-law transconductance for a device carrying `current` amps.
double gm(const DeviceConstants& dev, double wl, double current) {
    return std::sqrt(2.0 * dev.kprime * wl * current);
}

/// Saturation current at overdrive `vov`.
double sat_current(const DeviceConstants& dev, double wl, double vov) {
    return 0.5 * dev.kprime * wl * vov * vov;
}

double db20(double x) { return 20.0 * std::log10(x); }

MetricSpec metric(std::string name, std::string unit, MetricClass c, bool log_scale, bool positive,
                  std::vector<std::string> derived = {}) {
    return MetricSpec{std::move(name), std::move(unit), c, log_scale, positive, std::move(derived)};
}

MetricSchema amplifier_schema() {
    return MetricSchema{{
        metric("iq", "mA", MetricClass::DC, true, true),
        metric("dc_gain", "dB", MetricClass::DC, false, false),
        metric("ugbw", "MHz", MetricClass::AC, true, true),
        metric("phase_margin", "deg", MetricClass::AC, false, false, {"ugbw"}),
    }};
}

// Two-stage Miller OTA. `nmos_input` selects the input-pair device type; the first-stage
// mirror load and the second-stage driver are the complementary type.
//
// Parameters: wl1 input pair, wl3 mirror load, wl5 tail, wl6 second-stage
// driver, wl7 second-stage sink, wl8 bias reference, cc [pF], ibias [uA].
// Miller capacitor carries a nulling resistor of 1/gm6, so the remaining
// right-half-plane zero comes from the driver's gate-drain overlap.
PerformanceVector two_stage_ota(const TechnologyProfile& tech, const DesignPoint& d,
                                bool nmos_input) {
    const auto& v = d.values;
    const double wl1 = v[0], wl3 = v[1], wl5 = v[2], wl6 = v[3], wl7 = v[4], wl8 = v[5];
    const double cc = v[6] * kPico;
    const double ibias = v[7] * kMicro;

    const DeviceConstants& in_dev = nmos_input ? tech.nmos : tech.pmos;
    const DeviceConstants& drv_dev = nmos_input ? tech.pmos : tech.nmos;
    const double lambda_sum = tech.nmos.lambda + tech.pmos.lambda;

    const double i_tail = ibias * wl5 / wl8;
    const double i_branch = 0.5 * i_tail;
    const double i_second = ibias * wl7 / wl8;

    const double gm1 = gm(in_dev, wl1, i_branch);
    const double gm6 = gm(drv_dev, wl6, i_second);
    const double a1 = gm1 / (lambda_sum * i_branch);
    const double a2 = gm6 / (lambda_sum * i_second);

    const double c1 = tech.unit_cap * (wl1 + wl3 + 2.0 * wl6);
    const double c2 = 1.0 * kPico + tech.unit_cap * (wl6 + wl7);
    const double cgd6 = 0.3 * tech.unit_cap * wl6;

    const double ugbw = gm1 / (2.0 * kPi * cc);
    const double p2 = gm6 * cc / (2.0 * kPi * (c1 * c2 + cc * (c1 + c2)));
    const double z = gm6 / (2.0 * kPi * cgd6);

    const double pm = 90.0 - rad_to_deg(std::atan(ugbw / p2)) - rad_to_deg(std::atan(ugbw / z));
    const double iq_ma = (ibias + i_tail + i_second) * 1e3;
    return PerformanceVector{{iq_ma, db20(a1 * a2), ugbw / 1e6, pm}};
}

// Two-stage shunt-feedback TIA.
// Parameters: wl1 input device, wl2 first-stage load, wl3 second-stage driver,
// wl4 second-stage current ratio, rf [kOhm], ibias [uA].
PerformanceVector two_stage_tia(const TechnologyProfile& tech, const DesignPoint& d) {
    const auto& v = d.values;
    const double wl1 = v[0], wl2 = v[1], wl3 = v[2], wl4 = v[3];
    const double rf = v[4] * 1e3;
    const double ibias = v[5] * kMicro;
    const double lambda_sum = tech.nmos.lambda + tech.pmos.lambda;

    const double i1 = ibias;
    const double i2 = ibias * wl4 / 4.0;
    const double gm1 = gm(tech.nmos, wl1, i1);
    const double gm3 = gm(tech.pmos, wl3, i2);
    const double load_share = wl2 / (wl2 + 2.0);
    const double a1 = gm1 / (i1 * (tech.nmos.lambda + tech.pmos.lambda * load_share));
    const double a2 = gm3 / (lambda_sum * i2);
    const double a = a1 * a2;

    const double c_in = 0.3 * kPico + tech.unit_cap * wl1;
    const double c_m = 0.5 * kPico + tech.unit_cap * wl2;
    const double c_out = 0.5 * kPico + tech.unit_cap * (wl3 + wl4);
    const double c_f = 0.1 * kPico;

    const double ugbw = gm1 / (2.0 * kPi * c_m);
    const double p2 = gm3 / (2.0 * kPi * c_out);
    const double p_in = 1.0 / (2.0 * kPi * rf * c_in);
    const double z_f = 1.0 / (2.0 * kPi * rf * c_f);
    const double pm = 90.0 - rad_to_deg(std::atan(ugbw / p2)) -
                      rad_to_deg(std::atan(ugbw / p_in)) + rad_to_deg(std::atan(ugbw / z_f));

    const double zt = rf * a / (1.0 + a);
    const double iq_ma = (ibias + i1 + i2) * 1e3;
    return PerformanceVector{{iq_ma, db20(zt), ugbw / 1e6, pm}};
}

// Three-stage nested-Miller TIA.
// Parameters: wl1..wl3 stage drivers, wl4 first-stage load, wl5/wl6 current
// ratios of stages two and three, rf [kOhm], cc [pF], ibias [uA].
PerformanceVector three_stage_tia(const TechnologyProfile& tech, const DesignPoint& d) {
    const auto& v = d.values;
    const double wl1 = v[0], wl2 = v[1], wl3 = v[2], wl4 = v[3], wl5 = v[4], wl6 = v[5];
    const double rf = v[6] * 1e3;
    const double cc = v[7] * kPico;
    const double ibias = v[8] * kMicro;
    const double lambda_sum = tech.nmos.lambda + tech.pmos.lambda;

    const double i1 = ibias;
    const double i2 = ibias * wl5 / 4.0;
    const double i3 = ibias * wl6 / 4.0;
    const double gm1 = gm(tech.nmos, wl1, i1);
    const double gm2 = gm(tech.pmos, wl2, i2);
    const double gm3 = gm(tech.nmos, wl3, i3);
    const double load_share = wl4 / (wl4 + 2.0);
    const double a1 = gm1 / (i1 * (tech.nmos.lambda + tech.pmos.lambda * load_share));
    const double a2 = gm2 / (lambda_sum * i2);
    const double a3 = gm3 / (lambda_sum * i3);
    const double a = a1 * a2 * a3;

    const double c2 = 0.1 * kPico + 2.0 * tech.unit_cap * (wl2 + wl5);
    const double c3 = 0.5 * kPico + tech.unit_cap * (wl3 + wl6);
    const double c_in = 0.3 * kPico + tech.unit_cap * wl1;
    const double c_f = 0.1 * kPico;

    const double ugbw = gm1 / (2.0 * kPi * cc);
    const double p2 = gm2 / (2.0 * kPi * c2);
    const double p3 = gm3 / (2.0 * kPi * c3);
    const double p_in = 1.0 / (2.0 * kPi * rf * c_in);
    const double z_f = 1.0 / (2.0 * kPi * rf * c_f);
    const double pm = 90.0 - rad_to_deg(std::atan(ugbw / p2)) - rad_to_deg(std::atan(ugbw / p3)) -
                      rad_to_deg(std::atan(ugbw / p_in)) + rad_to_deg(std::atan(ugbw / z_f));

    const double zt = rf * a / (1.0 + a);
    const double iq_ma = (ibias + i1 + i2 + i3) * 1e3;
    return PerformanceVector{{iq_ma, db20(zt), ugbw / 1e6, pm}};
}

// Clocked comparator: static preamp with tail current, regenerative latch,
// output inverter.
// Parameters: wl_in, wl_tail, wl_latch, wl_inv, cload [fF], ibias [uA].
PerformanceVector comparator(const TechnologyProfile& tech, const DesignPoint& d) {
    const auto& v = d.values;
    const double wl_in = v[0], wl_tail = v[1], wl_latch = v[2], wl_inv = v[3];
    const double cload = v[4] * kFemto;
    const double ibias = v[5] * kMicro;
    constexpr double kClock = 100e6;
    constexpr double kInputStep = 5e-3;

    const double i_tail = ibias * wl_tail / 4.0;
    const double c_x = 10.0 * kFemto + tech.unit_cap * (wl_in + 2.0 * wl_latch);
    const double c_out = cload + tech.unit_cap * (2.0 * wl_latch + wl_inv);
    const double c_sw = cload + tech.unit_cap * (2.0 * wl_in + 4.0 * wl_latch + 2.0 * wl_inv);

    const double power = tech.vdd * (ibias + i_tail) + kClock * c_sw * tech.vdd * tech.vdd;

    const double gm_in = gm(tech.nmos, wl_in, 0.5 * i_tail);
    const double gm_latch = gm(tech.nmos, wl_latch, 0.5 * i_tail);
    const double t_pre = c_x * tech.nmos.vth / (0.5 * i_tail);
    const double v0 = kInputStep * gm_in * t_pre / c_x;
    const double t_latch = (c_out / gm_latch) * std::log1p(0.5 * tech.vdd / v0);
    const double i_inv = sat_current(tech.pmos, wl_inv, tech.vdd - tech.pmos.vth);
    const double t_inv = 20.0 * kFemto * 0.5 * tech.vdd / i_inv;

    return PerformanceVector{{power, t_pre + t_latch + t_inv}};
}

// Cross-coupled level shifter from a 0.6*Vdd domain up to Vdd, with a weak
// always-on bleeder on the output node.
// Parameters: wl_n pull-down, wl_p cross-coupled pull-up, wl_inv_n and
// wl_inv_p of the low-domain input inverter, cload [fF].
PerformanceVector level_shifter(const TechnologyProfile& tech, const DesignPoint& d) {
    const auto& v = d.values;
    const double wl_n = v[0], wl_p = v[1], wl_inv_n = v[2], wl_inv_p = v[3];
    const double cload = v[4] * kFemto;
    constexpr double kClock = 100e6;

    const double vddh = tech.vdd;
    const double vddl = 0.6 * tech.vdd;

    const double g_pullup = tech.pmos.kprime * wl_p * (vddh - tech.pmos.vth);
    const double g_bleed = tech.nmos.kprime * (vddl - tech.nmos.vth);
    const double ratio = g_pullup / (g_pullup + g_bleed);

    const double c_node = cload + tech.unit_cap * (wl_n + 2.0 * wl_p);
    const double c_sw = c_node + tech.unit_cap * (wl_inv_n + wl_inv_p + wl_n);
    const double static_power = 0.5 * vddh * vddh * g_pullup * g_bleed / (g_pullup + g_bleed);
    const double power = static_power + kClock * c_sw * vddh * vddh;

    const double i_n = sat_current(tech.nmos, wl_n, vddl - tech.nmos.vth);
    const double i_p = sat_current(tech.pmos, wl_p, vddh - tech.pmos.vth);
    const double i_net = i_n * i_n / (i_n + i_p);
    const double t_pull_down = c_node * 0.5 * vddh / i_net;
    const double t_pull_up = c_node * 0.5 * vddh / i_p;

    const double c_a = 5.0 * kFemto + tech.unit_cap * wl_n;
    const double t_in_n = c_a * 0.5 * vddl / sat_current(tech.nmos, wl_inv_n, vddl - tech.nmos.vth);
    const double t_in_p = c_a * 0.5 * vddl / sat_current(tech.pmos, wl_inv_p, vddl - tech.pmos.vth);

    const double t_rise = t_in_p + t_pull_down + t_pull_up;
    const double t_fall = t_in_n + t_pull_down;
    const double skew = t_rise - t_fall;
    const double balance = std::sqrt(skew * skew + kPico * kPico);
    return PerformanceVector{{power, ratio, 0.5 * (t_rise + t_fall), balance}};
}

using Evaluator = PerformanceVector (*)(const TechnologyProfile&, const DesignPoint&);

const std::map<std::string, Evaluator, std::less<>>& evaluators() {
    static const std::map<std::string, Evaluator, std::less<>> table{
        {"two_stage_ota_nmos",
         [](const TechnologyProfile& t, const DesignPoint& d) { return two_stage_ota(t, d, true); }},
        {"two_stage_ota_pmos",
         [](const TechnologyProfile& t, const DesignPoint& d) { return two_stage_ota(t, d, false); }},
        {"two_stage_tia", &two_stage_tia},
        {"three_stage_tia", &three_stage_tia},
        {"comparator", &comparator},
        {"level_shifter", &level_shifter},
    };
    return table;
}

std::vector<ParameterSpec> ota_parameters() {
    return {
        {"wl1", "", 2.0, 50.0, 1.0},   {"wl3", "", 1.0, 20.0, 0.5},  {"wl5", "", 1.0, 40.0, 1.0},
        {"wl6", "", 5.0, 100.0, 1.0},  {"wl7", "", 1.0, 40.0, 1.0},  {"wl8", "", 2.0, 10.0, 0.5},
        {"cc", "pF", 0.5, 5.0, 0.1},   {"ibias", "uA", 5.0, 100.0, 1.0},
    };
}

std::vector<CircuitTopology> build_topologies() {
    std::vector<CircuitTopology> out;
    out.push_back({"ota2_nmos", "two-stage Miller-compensated OTA, NMOS input pair",
                   ota_parameters(), amplifier_schema(), "two_stage_ota_nmos"});
    out.push_back({"ota2_pmos", "two-stage Miller-compensated OTA, PMOS input pair",
                   ota_parameters(), amplifier_schema(), "two_stage_ota_pmos"});
    out.push_back({"tia2",
                   "two-stage transimpedance amplifier",
                   {{"wl1", "", 2.0, 50.0, 1.0},
                    {"wl2", "", 1.0, 20.0, 0.5},
                    {"wl3", "", 5.0, 100.0, 1.0},
                    {"wl4", "", 1.0, 40.0, 1.0},
                    {"rf", "kOhm", 1.0, 50.0, 0.5},
                    {"ibias", "uA", 5.0, 100.0, 1.0}},
                   amplifier_schema(),
                   "two_stage_tia"});
    out.push_back({"tia3",
                   "three-stage transimpedance amplifier",
                   {{"wl1", "", 2.0, 50.0, 1.0},
                    {"wl2", "", 2.0, 50.0, 1.0},
                    {"wl3", "", 5.0, 100.0, 1.0},
                    {"wl4", "", 1.0, 20.0, 0.5},
                    {"wl5", "", 1.0, 40.0, 1.0},
                    {"wl6", "", 1.0, 40.0, 1.0},
                    {"rf", "kOhm", 1.0, 50.0, 0.5},
                    {"cc", "pF", 0.5, 5.0, 0.1},
                    {"ibias", "uA", 5.0, 100.0, 1.0}},
                   amplifier_schema(),
                   "three_stage_tia"});
    out.push_back({"comparator",
                   "clocked comparator with static preamplifier",
                   {{"wl_in", "", 2.0, 40.0, 1.0},
                    {"wl_tail", "", 1.0, 40.0, 1.0},
                    {"wl_latch", "", 1.0, 20.0, 0.5},
                    {"wl_inv", "", 1.0, 20.0, 0.5},
                    {"cload", "fF", 5.0, 100.0, 1.0},
                    {"ibias", "uA", 5.0, 100.0, 1.0}},
                   MetricSchema{{metric("dc_power", "W", MetricClass::DC, true, true),
                                 metric("avg_delay", "s", MetricClass::Transient, true, true)}},
                   "comparator"});
    out.push_back({"level_shifter",
                   "cross-coupled level shifter",
                   {{"wl_n", "", 1.0, 40.0, 1.0},
                    {"wl_p", "", 1.0, 20.0, 0.5},
                    {"wl_inv_n", "", 1.0, 20.0, 0.5},
                    {"wl_inv_p", "", 1.0, 40.0, 1.0},
                    {"cload", "fF", 5.0, 100.0, 1.0}},
                   MetricSchema{{metric("dc_power", "W", MetricClass::DC, true, true),
                                 metric("ratio", "", MetricClass::DC, false, true),
                                 metric("avg_delay", "s", MetricClass::Transient, true, true),
                                 metric("delay_balance", "s", MetricClass::Transient, true, true,
                                        {"avg_delay"})}},
                   "level_shifter"});
    for (const auto& t : out) {
        t.validate();
    }
    return out;
}

std::vector<TechnologyProfile> build_technologies() {
    std::vector<TechnologyProfile> out{
        {"synth45", {300e-6, 0.35, 0.25}, {120e-6, 0.35, 0.30}, 1.0, 0.5e-15},
        {"synth130", {200e-6, 0.45, 0.12}, {80e-6, 0.45, 0.15}, 1.5, 1.5e-15},
        {"synth180", {170e-6, 0.50, 0.08}, {60e-6, 0.50, 0.10}, 1.8, 2.5e-15},
    };
    for (const auto& t : out) {
        t.validate();
    }
    return out;
}

const std::vector<CircuitTopology>& topologies() {
    static const std::vector<CircuitTopology> all = build_topologies();
    return all;
}

const std::vector<TechnologyProfile>& technologies() {
    static const std::vector<TechnologyProfile> all = build_technologies();
    return all;
}

}  // namespace

std::string_view to_string(MetricClass c) noexcept {
    switch (c) {
        case MetricClass::DC: return "dc";
        case MetricClass::AC: return "ac";
        case MetricClass::Transient: return "transient";
    }
    return "dc";
}

MetricClass metric_class_from_string(std::string_view s) {
    if (s == "dc") return MetricClass::DC;
    if (s == "ac") return MetricClass::AC;
    if (s == "transient") return MetricClass::Transient;
    throw std::invalid_argument("unknown metric class '" + std::string(s) + "'");
}

bool operator==(const MetricSpec& a, const MetricSpec& b) {
    return a.name == b.name && a.unit == b.unit && a.metric_class == b.metric_class &&
           a.log_scale == b.log_scale && a.positive == b.positive &&
           a.derived_from == b.derived_from;
}

bool operator==(const MetricSchema& a, const MetricSchema& b) {
    return a.metrics == b.metrics;
}

std::optional<std::size_t> MetricSchema::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        if (metrics[i].name == name) {
            return i;
        }
    }
    return std::nullopt;
}

std::vector<std::string> MetricSchema::names() const {
    std::vector<std::string> out;
    out.reserve(metrics.size());
    for (const auto& m : metrics) {
        out.push_back(m.name);
    }
    return out;
}

std::vector<bool> MetricSchema::log_flags() const {
    std::vector<bool> out;
    out.reserve(metrics.size());
    for (const auto& m : metrics) {
        out.push_back(m.log_scale);
    }
    return out;
}

std::size_t ParameterSpec::grid_points() const {
    return static_cast<std::size_t>(std::llround(range() / step)) + 1;
}

double ParameterSpec::grid_value(std::size_t index) const {
    const std::size_t last = grid_points() - 1;
    if (index >= last) {
        return upper;
    }
    return lower + step * static_cast<double>(index);
}

void TechnologyProfile::validate() const {
    const auto positive = [](const DeviceConstants& d) {
        return d.kprime > 0.0 && d.vth > 0.0 && d.lambda > 0.0;
    };
    if (!positive(nmos) || !positive(pmos) || !(vdd > 0.0) || !(unit_cap > 0.0)) {
        throw std::invalid_argument("technology '" + name + "' has non-positive constants");
    }
    if (!(vdd > nmos.vth) || !(vdd > pmos.vth)) {
        throw std::invalid_argument("technology '" + name + "' has vdd <= vth");
    }
}

void CircuitTopology::check_design(const DesignPoint& design) const {
    if (design.values.size() != parameters.size()) {
        throw DesignError(name + ": design has " + std::to_string(design.values.size()) +
                          " values, expected " + std::to_string(parameters.size()));
    }
    for (std::size_t i = 0; i < parameters.size(); ++i) {
        const auto& p = parameters[i];
        const double v = design.values[i];
        if (!std::isfinite(v) || v < p.lower || v > p.upper) {
            throw DesignError(name + ": parameter '" + p.name + "' = " + std::to_string(v) +
                              " outside [" + std::to_string(p.lower) + ", " +
                              std::to_string(p.upper) + "]");
        }
    }
}

void CircuitTopology::validate() const {
    if (parameters.empty() || schema.metrics.empty()) {
        throw std::invalid_argument(name + ": empty parameter list or schema");
    }
    for (const auto& p : parameters) {
        if (!std::isfinite(p.lower) || !std::isfinite(p.upper) || !(p.lower < p.upper) ||
            !(p.step > 0.0)) {
            throw std::invalid_argument(name + ": bad bounds for '" + p.name + "'");
        }
        const double cells = p.range() / p.step;
        if (std::abs(cells - std::round(cells)) > 1e-9 * std::max(1.0, cells)) {
            throw std::invalid_argument(name + ": step does not divide range of '" + p.name + "'");
        }
    }
    std::set<std::string> seen;
    for (const auto& m : schema.metrics) {
        if (!seen.insert(m.name).second) {
            throw std::invalid_argument(name + ": duplicate metric '" + m.name + "'");
        }
    }
    if (!evaluators().contains(evaluator)) {
        throw std::invalid_argument(name + ": unknown evaluator '" + evaluator + "'");
    }
}

const CircuitTopology& topology(std::string_view name) {
    for (const auto& t : topologies()) {
        if (t.name == name) {
            return t;
        }
    }
    throw UnknownNameError("unknown topology '" + std::string(name) + "'");
}

const TechnologyProfile& technology(std::string_view name) {
    for (const auto& t : technologies()) {
        if (t.name == name) {
            return t;
        }
    }
    throw UnknownNameError("unknown technology '" + std::string(name) + "'");
}

std::vector<std::string> topology_names() {
    std::vector<std::string> out;
    for (const auto& t : topologies()) {
        out.push_back(t.name);
    }
    return out;
}

std::vector<std::string> technology_names() {
    std::vector<std::string> out;
    for (const auto& t : technologies()) {
        out.push_back(t.name);
    }
    return out;
}

PerformanceVector evaluate_oracle(const CircuitTopology& topo, const TechnologyProfile& tech,
                                  const DesignPoint& design) {
    g_oracle_calls.fetch_add(1, std::memory_order_relaxed);
    topo.check_design(design);
    const auto it = evaluators().find(topo.evaluator);
    if (it == evaluators().end()) {
        throw UnknownNameError("unknown evaluator '" + topo.evaluator + "'");
    }
    PerformanceVector perf = it->second(tech, design);
    for (std::size_t i = 0; i < perf.values.size(); ++i) {
        const double v = perf.values[i];
        if (!std::isfinite(v) || (topo.schema.metrics[i].positive && !(v > 0.0))) {
            throw std::domain_error(topo.name + ": metric '" + topo.schema.metrics[i].name +
                                    "' evaluated to " + std::to_string(v));
        }
    }
    return perf;
}

PerformanceVector evaluate_oracle(std::string_view topology_name, std::string_view tech_name,
                                  const DesignPoint& design) {
    return evaluate_oracle(topology(topology_name), technology(tech_name), design);
}

std::uint64_t oracle_invocations() noexcept {
    return g_oracle_calls.load(std::memory_order_relaxed);
}

}  // namespace insight
