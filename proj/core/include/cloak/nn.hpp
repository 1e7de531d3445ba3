#pragma once

#include <map>
#include <string>
#include <vector>

#include "cloak/autograd.hpp"
#include "cloak/rng.hpp"

namespace cloak {

// Ordered, named collection of trainable arrays.
class ParameterStore {
public:
    ag::Var& add(const std::string& name, Tensor init);
    const ag::Var& get(const std::string& name) const;
    ag::Var& get(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, ag::Var>& all() const { return params_; }
    std::vector<ag::Var> vars() const;
    std::size_t count() const;

    void set_trainable(bool on);
    void zero_grad();

    // Deep copy: the clone shares no storage with this store.
    ParameterStore clone() const;

private:
    std::map<std::string, ag::Var> params_;
};

// Kaiming-uniform style fan-in initialisation.
Tensor init_fan_in(const Shape& shape, int fan_in, Rng& rng, double gain = 1.0);

class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step() = 0;
    void zero_grad();

protected:
    explicit Optimizer(std::vector<ag::Var> params) : params_(std::move(params)) {}
    std::vector<ag::Var> params_;
};

class Sgd final : public Optimizer {
public:
    Sgd(std::vector<ag::Var> params, double lr) : Optimizer(std::move(params)), lr_(lr) {}
    void step() override;

private:
    double lr_;
};

class Adam final : public Optimizer {
public:
    Adam(std::vector<ag::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step() override;

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace cloak
