#include "shgvqa/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace shgvqa {

double LrSchedule::lr_at(std::int64_t step) const {
    if (total_steps <= 0) {
        return base_lr;
    }
    const auto warmup = static_cast<std::int64_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (step >= total_steps) {
        return 0.0;
    }
    return base_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup);
}

AdamOptimizer::AdamOptimizer(NamedParams params, LrSchedule schedule, double beta1, double beta2,
                             double eps, double weight_decay, double grad_clip)
    : schedule_(schedule),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay),
      grad_clip_(grad_clip) {
    slots_.reserve(params.size());
    for (auto& [name, tensor] : params) {
        if (!tensor.defined()) {
            throw std::invalid_argument("AdamOptimizer: parameter '" + name + "' is undefined");
        }
        Slot slot;
        slot.name = name;
        slot.param = tensor;
        slot.m.assign(static_cast<std::size_t>(tensor.size()), 0.0);
        slot.v.assign(static_cast<std::size_t>(tensor.size()), 0.0);
        slot.param.ensure_grad();
        slots_.push_back(std::move(slot));
    }
}

void AdamOptimizer::step() {
    for (const Slot& slot : slots_) {
        if (!slot.param.has_grad()) {
            throw std::logic_error("optimizer_step: parameter '" + slot.name +
                                   "' has no populated gradient");
        }
    }
    const std::int64_t t = step_ + 1;
    const double lr = schedule_.lr_at(t);

    double clip_scale = 1.0;
    if (grad_clip_ > 0.0) {
        double sq = 0.0;
        for (const Slot& slot : slots_) {
            for (double g : slot.param.grad()) {
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > grad_clip_) {
            clip_scale = grad_clip_ / norm;
        }
    }

    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (Slot& slot : slots_) {
        auto theta = slot.param.raw_data();
        auto grad = slot.param.raw_grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            double g = grad[i] * clip_scale;
            if (weight_decay_ != 0.0) {
                g += weight_decay_ * theta[i];
            }
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
        slot.param.zero_grad();
    }
    step_ = t;
    last_lr_ = lr;
}

void AdamOptimizer::zero_grads() {
    for (Slot& slot : slots_) {
        slot.param.zero_grad();
    }
}

}  // namespace shgvqa
