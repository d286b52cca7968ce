#pragma once

// JSON mappings for registry types shared by the dataset and checkpoint formats.

#include <string>
#include <vector>

#include "insight/circuits.hpp"
#include "json.hpp"

namespace insight::detail {

using nlohmann::json;

inline json to_json(const ParameterSpec& p) {
    return json{{"name", p.name}, {"unit", p.unit}, {"lower", p.lower}, {"upper", p.upper},
                {"step", p.step}};
}

inline ParameterSpec parameter_from_json(const json& j) {
    return ParameterSpec{j.at("name").get<std::string>(), j.at("unit").get<std::string>(),
                         j.at("lower").get<double>(), j.at("upper").get<double>(),
                         j.at("step").get<double>()};
}

inline json to_json(const MetricSchema& schema) {
    json out = json::array();
    for (const auto& m : schema.metrics) {
        out.push_back(json{{"name", m.name},
                           {"unit", m.unit},
                           {"class", std::string(to_string(m.metric_class))},
                           {"log", m.log_scale},
                           {"positive", m.positive},
                           {"derived_from", m.derived_from}});
    }
    return out;
}

inline MetricSchema schema_from_json(const json& j) {
    MetricSchema schema;
    for (const auto& m : j) {
        schema.metrics.push_back(MetricSpec{
            m.at("name").get<std::string>(), m.at("unit").get<std::string>(),
            metric_class_from_string(m.at("class").get<std::string>()), m.at("log").get<bool>(),
            m.at("positive").get<bool>(), m.at("derived_from").get<std::vector<std::string>>()});
    }
    return schema;
}

inline json to_json(const std::vector<ParameterSpec>& params) {
    json out = json::array();
    for (const auto& p : params) {
        out.push_back(to_json(p));
    }
    return out;
}

inline std::vector<ParameterSpec> parameters_from_json(const json& j) {
    std::vector<ParameterSpec> out;
    for (const auto& p : j) {
        out.push_back(parameter_from_json(p));
    }
    return out;
}

}  // namespace insight::detail
