#include <benchmark/benchmark.h>

#include "cloak/attack.hpp"
#include "cloak/model.hpp"

namespace {

cloak::ModelConfig config_for(int image_size, int c0, int c1) {
    cloak::ModelConfig c;
    c.image_size = image_size;
    c.base_channels = c0;
    c.mid_channels = c1;
    return c;
}

void BM_Forward(benchmark::State& state) {
    const auto cfg = config_for(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                                static_cast<int>(state.range(2)));
    const auto model = cloak::DiffusionModel::create(cfg, cloak::build_linear_schedule());
    cloak::Rng rng(1);
    const int batch = 4;
    const auto x = cloak::ag::constant(cloak::randn({batch, 3, cfg.image_size, cfg.image_size}, rng));
    const auto prompt = cloak::ag::constant(model.encode("a photo of sks person").matrix);
    cloak::ag::NoGradGuard guard;
    for (auto _ : state) {
        auto pred = model.unet.predict(x, 500, prompt, false);
        benchmark::DoNotOptimize(pred.noise.value().data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}

void BM_InputGradient(benchmark::State& state) {
    const auto cfg = config_for(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                                static_cast<int>(state.range(2)));
    auto model = cloak::DiffusionModel::create(cfg, cloak::build_linear_schedule());
    model.unet.params().set_trainable(false);
    cloak::Rng rng(1);
    const int batch = 4;
    const auto prompt = cloak::ag::constant(model.encode("a photo of sks person").matrix);
    const auto eps = cloak::randn({batch, 3, cfg.image_size, cfg.image_size}, rng);
    for (auto _ : state) {
        cloak::ag::Var x(cloak::randn({batch, 3, cfg.image_size, cfg.image_size}, rng), true);
        auto loss = cloak::cond_loss(model.unet, x, prompt, 500, eps, model.schedule);
        cloak::ag::backward(loss);
        benchmark::DoNotOptimize(x.grad().data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}

void BM_TrainStep(benchmark::State& state) {
    const auto cfg = config_for(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                                static_cast<int>(state.range(2)));
    auto model = cloak::DiffusionModel::create(cfg, cloak::build_linear_schedule());
    cloak::Rng rng(1);
    const int batch = 8;
    const auto prompt = cloak::ag::constant(model.encode("a photo of person").matrix);
    cloak::Adam opt(model.unet.params().vars(), 1e-3);
    for (auto _ : state) {
        const cloak::ag::Var x(cloak::randn({batch, 3, cfg.image_size, cfg.image_size}, rng));
        const auto eps = cloak::randn(x.shape(), rng);
        opt.zero_grad();
        auto loss = cloak::cond_loss(model.unet, x, prompt, 500, eps, model.schedule);
        cloak::ag::backward(loss);
        opt.step();
    }
    state.SetItemsProcessed(state.iterations() * batch);
}

// One full attack-iteration gradient: B segment timesteps, conditional plus
// attention losses. Args: image size, segments.
void BM_LrtgeGradient(benchmark::State& state) {
    const auto cfg = config_for(static_cast<int>(state.range(0)), 16, 32);
    const auto model = cloak::DiffusionModel::create(cfg, cloak::build_linear_schedule());
    cloak::Rng rng(1);
    const int batch = 4;
    const auto prompt = model.encode("a photo of sks person");
    const cloak::AttackInputs in{&model.unet, &model.schedule,
                                 cloak::randn({batch, 3, cfg.image_size, cfg.image_size}, rng, 0.5), prompt, &prompt};
    cloak::AttackConfig ac;
    ac.B = static_cast<int>(state.range(1));
    const auto weights = cloak::resolve_variant(cloak::AttackVariant::dadiff, ac);
    const cloak::Tensor delta(in.x0.shape());
    for (auto _ : state) {
        auto g = cloak::lrtge_gradient(in, delta, weights, rng);
        benchmark::DoNotOptimize(g.g_total.data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}

}  // namespace

BENCHMARK(BM_LrtgeGradient)->Args({16, 1})->Args({16, 25})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward)->Args({16, 8, 16})->Args({16, 16, 32})->Args({32, 8, 16})->Args({32, 16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_InputGradient)->Args({16, 8, 16})->Args({16, 16, 32})->Args({32, 16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Args({16, 8, 16})->Args({16, 16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
