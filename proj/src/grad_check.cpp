#include "insight/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace insight {

namespace {

double checked(double v) {
    if (!std::isfinite(v)) {
        throw NumericError("grad_check: loss evaluated to a non-finite value");
    }
    return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::function<void()>& accumulate_gradients,
                           const ParameterList& params, const GradCheckOptions& options) {
    checked(loss());
    zero_grads(params);
    accumulate_gradients();

    GradCheckReport report;
    report.tolerance = options.tolerance;
    const double two_eps = 2.0 * options.epsilon;

    for (Parameter* p : params) {
        if (!p->trainable) {
            continue;
        }
        GradCheckBlock block;
        block.name = p->name;
        block.entries = p->value.size();
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double original = p->value[i];
            p->value[i] = original + options.epsilon;
            const double plus = checked(loss());
            p->value[i] = original - options.epsilon;
            const double minus = checked(loss());
            p->value[i] = original;

            const double numeric = (plus - minus) / two_eps;
            const double analytic = p->grad[i];
            const double abs_err = std::abs(analytic - numeric);
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
            const double rel_err = abs_err / denom;
            block.max_absolute_error = std::max(block.max_absolute_error, abs_err);
            if (rel_err > block.max_relative_error) {
                block.max_relative_error = rel_err;
                block.worst_index = i;
            }
        }
        report.entries += block.entries;
        report.max_relative_error = std::max(report.max_relative_error, block.max_relative_error);
        report.blocks.push_back(std::move(block));
    }
    return report;
}

}  // namespace insight
