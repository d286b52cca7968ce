#include "insight/optim.hpp"

#include <cmath>
#include <numbers>

namespace insight {

double CosineSchedule::at(std::size_t step) const noexcept {
    if (total_steps == 0 || step >= total_steps) {
        return min_lr;
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(ParameterList params, CosineSchedule schedule, AdamOptions options)
    : params_(std::move(params)), schedule_(schedule), options_(options) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::step() {
    const double lr = schedule_.at(steps_);
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double correction1 = 1.0 - std::pow(options_.beta1, t);
    const double correction2 = 1.0 - std::pow(options_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (!p.trainable) {
            continue;
        }
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g;
            v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g * g;
            const double m_hat = m[j] / correction1;
            const double v_hat = v[j] / correction2;
            p.value[j] -= lr * m_hat / (std::sqrt(v_hat) + options_.epsilon);
        }
    }
}

void Adam::zero_grad() {
    zero_grads(params_);
}

double grad_norm(const ParameterList& params) {
    double sum = 0.0;
    for (const Parameter* p : params) {
        if (!p->trainable) {
            continue;
        }
        for (double g : p->grad.values()) {
            sum += g * g;
        }
    }
    return std::sqrt(sum);
}

void clip_grad_norm(const ParameterList& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm <= max_norm || norm == 0.0) {
        return;
    }
    const double scale = max_norm / norm;
    for (Parameter* p : params) {
        if (p->trainable) {
            p->grad *= scale;
        }
    }
}

}  // namespace insight
