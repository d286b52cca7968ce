#pragma once

#include <cstddef>
#include <vector>

#include "insight/ops.hpp"

namespace insight {

/// lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / T)) / 2, held at lr_min past T.
struct CosineSchedule {
    double base_lr = 1e-3;
    double min_lr = 0.0;
    std::size_t total_steps = 1;

    [[nodiscard]] double at(std::size_t step) const noexcept;
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction, driven by a cosine-annealed learning rate.
class Adam {
public:
    Adam(ParameterList params, CosineSchedule schedule, AdamOptions options = {});

    /// Applies one update from the currently accumulated gradients.
    void step();
    void zero_grad();

    [[nodiscard]] std::size_t step_count() const noexcept { return steps_; }
    [[nodiscard]] double current_lr() const noexcept { return schedule_.at(steps_); }
    [[nodiscard]] const CosineSchedule& schedule() const noexcept { return schedule_; }
    [[nodiscard]] const AdamOptions& options() const noexcept { return options_; }
    [[nodiscard]] const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    [[nodiscard]] const std::vector<Tensor>& second_moments() const noexcept { return v_; }

private:
    ParameterList params_;
    CosineSchedule schedule_;
    AdamOptions options_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t steps_ = 0;
};

/// Global L2 norm of all trainable gradients.
[[nodiscard]] double grad_norm(const ParameterList& params);

/// Rescales gradients so their global norm is at most `max_norm`.
void clip_grad_norm(const ParameterList& params, double max_norm);

}  // namespace insight
