#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "shgvqa/tensor.hpp"

namespace shgvqa {

// Linear warmup to base_lr over warmup_frac of total_steps, then linear decay
// to zero. total_steps == 0 disables the schedule (constant base_lr).
struct LrSchedule {
    double base_lr = 1e-4;
    double warmup_frac = 0.1;
    std::int64_t total_steps = 0;

    double lr_at(std::int64_t step) const;  // step is 1-based
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Adam with bias correction. Gradients are zeroed after each step; parameter
// grads are allocated at registration so an untouched parameter reads as a
// zero gradient, not a missing one.
class AdamOptimizer {
public:
    AdamOptimizer(NamedParams params, LrSchedule schedule, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8, double weight_decay = 0.0, double grad_clip = 0.0);

    void step();
    std::int64_t step_count() const { return step_; }
    double last_lr() const { return last_lr_; }
    void zero_grads();

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };

    std::vector<Slot> slots_;
    LrSchedule schedule_;
    double beta1_, beta2_, eps_, weight_decay_, grad_clip_;
    std::int64_t step_ = 0;
    double last_lr_ = 0.0;
};

}  // namespace shgvqa
