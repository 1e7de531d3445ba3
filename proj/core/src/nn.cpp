#include "cloak/nn.hpp"

#include <cmath>

#include "cloak/errors.hpp"

namespace cloak {

ag::Var& ParameterStore::add(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, ag::Var(std::move(init), true));
    if (!inserted) throw InternalError("duplicate parameter name: " + name);
    return it->second;
}

const ag::Var& ParameterStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InternalError("unknown parameter: " + name);
    return it->second;
}

ag::Var& ParameterStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InternalError("unknown parameter: " + name);
    return it->second;
}

std::vector<ag::Var> ParameterStore::vars() const {
    std::vector<ag::Var> out;
    out.reserve(params_.size());
    for (const auto& [_, v] : params_) out.push_back(v);
    return out;
}

std::size_t ParameterStore::count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().numel();
    return n;
}

void ParameterStore::set_trainable(bool on) {
    for (auto& [_, v] : params_) v.set_requires_grad(on);
}

void ParameterStore::zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
}

ParameterStore ParameterStore::clone() const {
    ParameterStore out;
    for (const auto& [name, v] : params_) out.params_.emplace(name, ag::Var(v.value(), v.requires_grad()));
    return out;
}

Tensor init_fan_in(const Shape& shape, int fan_in, Rng& rng, double gain) {
    const double bound = gain * std::sqrt(3.0 / std::max(1, fan_in));
    return rand_uniform(shape, rng, -bound, bound);
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Sgd::step() {
    for (auto& p : params_) {
        if (!p.has_grad()) continue;
        const Tensor g = p.grad();
        Tensor& w = p.mutable_value();
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr_ * g[i];
    }
}

Adam::Adam(std::vector<ag::Var> params, double lr, double beta1, double beta2, double eps)
    : Optimizer(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (!p.has_grad()) continue;
        const Tensor g = p.grad();
        Tensor& w = p.mutable_value();
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < w.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

}  // namespace cloak
