#pragma once

#include "cmrc/tensor.hpp"

#include <vector>

namespace cmrc {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay:
///   w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig config) : cfg_(config) {}

    /// One update over a fixed parameter list; moment slots are keyed by
    /// position, so the list must be the same (and in the same order) on
    /// every call.
    void step(std::vector<Tensor<T>>& params);

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return t_; }

private:
    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
    };

    AdamWConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Slot> slots_;
};

} // namespace cmrc
