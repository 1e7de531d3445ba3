#include "cloak/pipeline.hpp"

#include <cmath>

#include "cloak/errors.hpp"
#include "cloak/io.hpp"

namespace cloak {

const char* to_string(Mechanism m) {
    switch (m) {
        case Mechanism::dreambooth: return "dreambooth";
        case Mechanism::lora: return "lora";
        case Mechanism::ti: return "ti";
    }
    return "?";
}

Mechanism mechanism_from_string(const std::string& name) {
    for (Mechanism m : {Mechanism::dreambooth, Mechanism::lora, Mechanism::ti})
        if (name == to_string(m)) return m;
    throw ConfigError("unknown customization mechanism '" + name + "' (expected dreambooth, lora or ti)");
}

ImageBatch render_corpus(const CorpusConfig& corpus, std::uint64_t render_seed, int per_id) {
    ImageBatch out;
    for (int id = 0; id < corpus.identities; ++id) {
        const ImageBatch one =
            generate_identity_images(Identity::make(id, corpus.seed), per_id, render_seed, corpus.image_size);
        out = id == 0 ? one : ImageBatch::concat(out, one);
    }
    return out;
}

ImageBatch evaluation_corpus(const CorpusConfig& corpus) {
    return render_corpus(corpus, corpus.render_seed, corpus.per_id);
}

IdentityData identity_data(const CorpusConfig& corpus, int identity) {
    if (identity < 0 || identity >= corpus.identities) throw ArgumentError("identity outside the corpus");
    const ImageBatch all = generate_identity_images(Identity::make(identity, corpus.seed), corpus.per_id,
                                                    corpus.render_seed, corpus.image_size);
    auto [reference, target] = split_clean_perturbed(all);
    return {std::move(reference), std::move(target)};
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
    return derive_seed(seed, static_cast<std::uint64_t>(stage));
}

DiffusionModel build_base_model(const ExperimentConfig& config, std::vector<double>* losses) {
    ModelConfig m = config.model;
    m.image_size = config.corpus.image_size;
    return train_base_model(m, config.build_schedule(), config.base, config.corpus.seed,
                            stage_seed(config.seed, Stage::base), losses);
}

Embedder build_embedder(const ExperimentConfig& config) {
    const ImageBatch train =
        render_corpus(config.corpus, config.corpus.embedder_render_seed, config.corpus.embedder_per_id);
    return train_identity_embedder(train, evaluation_corpus(config.corpus), config.eval.embedder,
                                   stage_seed(config.seed, Stage::embedder));
}

AttackPrompts attack_prompts(const ExperimentConfig& config) {
    return {config.dreambooth.instance_prompt, config.dreambooth.base_prompt};
}

CustomizedModel customize(const DiffusionModel& base, const ImageBatch& instance, const ImageBatch& class_images,
                          Mechanism mechanism, const DreamboothConfig& config, std::uint64_t seed,
                          std::vector<double>* losses) {
    CustomizedModel out;
    out.mechanism = mechanism;
    switch (mechanism) {
        case Mechanism::dreambooth:
            out.unet = dreambooth_finetune(base, instance, class_images, config, seed, losses);
            break;
        case Mechanism::lora:
            out.lora = lora_finetune(base, instance, class_images, config, seed, losses);
            out.unet = with_adapter(base.unet, out.lora);
            break;
        case Mechanism::ti:
            out.ti = textual_inversion_finetune(base, instance, config, seed, losses);
            out.unet = base.unet.clone();
            break;
    }
    return out;
}

std::map<std::string, PromptEmbedding> customized_prompts(const DiffusionModel& base, const CustomizedModel& model,
                                                          const std::vector<std::string>& prompts) {
    std::map<std::string, PromptEmbedding> out;
    for (const auto& p : prompts) out[p] = model.ti ? encode_with_embedding(base, p, *model.ti) : base.encode(p);
    return out;
}

MetricsReport evaluate_customized(const DiffusionModel& base, const CustomizedModel& model,
                                  const ExperimentConfig& config, const ImageBatch& reference,
                                  const Embedder& embedder, std::uint64_t seed,
                                  std::map<std::string, ImageBatch>* samples) {
    const SamplingConfig sampling{config.eval.samples, config.eval.ddim_steps, seed};
    return evaluate_generations(model.unet, base.schedule, customized_prompts(base, model, config.eval.prompts),
                                reference, embedder, sampling, config.eval.tau, base.config.image_size, samples);
}

Tensor png_safe_pixels(const Tensor& clean, const Tensor& protected_pixels, double omega) {
    if (clean.shape() != protected_pixels.shape()) throw ArgumentError("png_safe_pixels: shape mismatch");
    constexpr double kQuantum = 2.0 / 65535.0;
    Tensor out(clean.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double q = quantize16(protected_pixels[i]);
        for (int guard = 0; guard < 4 && std::abs(q - clean[i]) > omega; ++guard)
            q = quantize16(q + (q > clean[i] ? -kQuantum : kQuantum));
        out[i] = q;
    }
    return out;
}

}  // namespace cloak
