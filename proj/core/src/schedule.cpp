#include "cloak/schedule.hpp"

#include <cmath>

#include "cloak/errors.hpp"

namespace cloak {

const char* to_string(AttentionKind kind) { return kind == AttentionKind::self ? "self" : "cross"; }

int AttentionTrace::count(AttentionKind kind) const {
    int n = 0;
    for (const auto& e : entries) n += (e.kind == kind);
    return n;
}

std::vector<const AttentionRecord*> AttentionTrace::of_kind(AttentionKind kind) const {
    std::vector<const AttentionRecord*> out;
    for (const auto& e : entries)
        if (e.kind == kind) out.push_back(&e);
    return out;
}

std::vector<std::string> AttentionTrace::module_ids() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.module_id);
    return out;
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= T)
        throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ArgumentError("schedule needs T >= 2");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ArgumentError("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double running = 1.0;
    for (int t = 0; t < T; ++t) {
        s.betas[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
        s.alphas[t] = 1.0 - s.betas[t];
        running *= s.alphas[t];
        s.alpha_bars[t] = running;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    schedule.check_timestep(t);
    if (x0.shape() != eps.shape()) throw ArgumentError("q_sample: eps shape differs from x0");
    const double a = std::sqrt(schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

ag::Var q_sample(const ag::Var& x0, std::span<const int> timesteps, const Tensor& eps, const NoiseSchedule& schedule) {
    if (x0.shape() != eps.shape()) throw ArgumentError("q_sample: eps shape differs from x0");
    const int N = x0.value().dim(0);
    if (timesteps.size() != 1 && timesteps.size() != static_cast<std::size_t>(N))
        throw ArgumentError("q_sample: need one timestep or one per sample");
    std::vector<double> a(N), b(N);
    for (int n = 0; n < N; ++n) {
        const int t = timesteps.size() == 1 ? timesteps[0] : timesteps[n];
        schedule.check_timestep(t);
        a[n] = std::sqrt(schedule.alpha_bars[t]);
        b[n] = std::sqrt(1.0 - schedule.alpha_bars[t]);
    }
    Tensor noise_part = eps;
    const std::size_t per = eps.numel() / N;
    for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < per; ++i) noise_part[n * per + i] *= b[n];
    return ag::add(ag::scale_samples(x0, a), ag::constant(std::move(noise_part)));
}

ag::Var cond_loss(const Denoiser& model, const ag::Var& x0, const ag::Var& prompt, std::span<const int> timesteps,
                  const Tensor& eps, const NoiseSchedule& schedule) {
    const ag::Var x_t = q_sample(x0, timesteps, eps, schedule);
    const Prediction pred = model.predict(x_t, timesteps, prompt, false);
    if (pred.noise.shape() != eps.shape())
        throw InternalError("model output " + shape_str(pred.noise.shape()) + " does not match noise " +
                            shape_str(eps.shape()));
    return ag::mse(pred.noise, ag::constant(eps));
}

ag::Var cond_loss(const Denoiser& model, const ag::Var& x0, const ag::Var& prompt, int t, const Tensor& eps,
                  const NoiseSchedule& schedule) {
    const int ts[1] = {t};
    return cond_loss(model, x0, prompt, std::span<const int>(ts, 1), eps, schedule);
}

}  // namespace cloak
