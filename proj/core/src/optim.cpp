#include "cmrc/optim.hpp"

#include <cmath>

namespace cmrc {

template <typename T>
void AdamW<T>::step(std::vector<Tensor<T>>& params) {
    if (slots_.empty()) {
        slots_.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            slots_[p].m.assign(params[p].size(), T(0));
            slots_[p].v.assign(params[p].size(), T(0));
        }
    }
    if (slots_.size() != params.size())
        throw ContractError("AdamW::step: parameter list changed size");
    ++t_;

    const T beta1 = T(cfg_.beta1), beta2 = T(cfg_.beta2);
    const T lr = T(cfg_.lr), eps = T(cfg_.eps), wd = T(cfg_.weight_decay);
    const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));

    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = params[p].mutable_values();
        if (slots_[p].m.size() != w.size())
            throw ContractError("AdamW::step: parameter " + std::to_string(p) + " changed shape");
        // missing grad means the parameter did not participate this step
        const std::vector<T>* g = params[p].has_grad() ? &params[p].grad() : nullptr;
        auto& m = slots_[p].m;
        auto& v = slots_[p].v;
        for (std::size_t i = 0; i < w.size(); ++i) {
            T gi = g ? (*g)[i] : T(0);
            m[i] = beta1 * m[i] + (T(1) - beta1) * gi;
            v[i] = beta2 * v[i] + (T(1) - beta2) * gi * gi;
            T m_hat = m[i] / bc1;
            T v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps) + lr * wd * w[i];
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

} // namespace cmrc
