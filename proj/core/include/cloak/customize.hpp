#pragma once

// Base-model pretraining and the customization methods under attack:
// Dreambooth with prior preservation, LoRA adapters and textual inversion.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cloak/model.hpp"

namespace cloak {

enum class OptimizerKind { sgd, adam };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

struct DreamboothConfig {
    // Toy-scale step size. Real-scale runs use 5e-7.
    double lr = 5e-4;
    int steps = 1000;
    // Surrogate fine-tuning inside the attack loop.
    int surrogate_steps = 3;
    double surrogate_lr = 5e-4;
    OptimizerKind optimizer = OptimizerKind::adam;
    int batch = 4;
    double lambda = 1.0;
    std::string instance_prompt = "a photo of sks person";
    std::string base_prompt = "a photo of person";
    int class_image_count = 8;
    int class_sample_steps = 50;
    std::string keyword = "sks";

    int lora_rank = 4;
    double lora_scale = 1.0;
    double lora_lr = 1e-3;
    double ti_lr = 5e-3;

    void validate() const;
};

struct BaseTrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 2e-3;
    // Identities used for pretraining; disjoint from the evaluation ids.
    int identity_offset = 100;
    int identity_count = 64;
    std::vector<std::string> prompts = {"a photo of person", "a dslr portrait of person", "a portrait of person",
                                        "a photo of person looking at the mirror",
                                        "a photo of person sitting on the chair",
                                        "a photo of person in front of the tower"};

    void validate() const;
};

// Pretrains encoder and UNet jointly on freshly rendered pool identities.
// `losses`, if given, receives the per-step training loss.
DiffusionModel train_base_model(const ModelConfig& model_config, const NoiseSchedule& schedule,
                                const BaseTrainConfig& config, std::uint64_t corpus_seed, std::uint64_t seed,
                                std::vector<double>* losses = nullptr);

// Samples class images with the base prompt, caching them under `cache_dir`.
// A cache entry is reused only when prompt, count, seed, sampler steps and
// model digest all match. `regenerated` reports whether sampling ran.
ImageBatch generate_class_images(const DiffusionModel& model, const std::string& base_prompt, int count,
                                 std::uint64_t seed, const std::filesystem::path& cache_dir, int sample_steps = 50,
                                 bool* regenerated = nullptr);
// Uncached variant.
ImageBatch sample_class_images(const DiffusionModel& model, const std::string& base_prompt, int count,
                               std::uint64_t seed, int sample_steps = 50);

// Instance denoising loss plus lambda times the prior term on class images.
// Fresh (t, eps) for each term come from `rng`.
ag::Var dreambooth_loss(const Denoiser& unet, const NoiseSchedule& schedule, const Tensor& instance,
                        const ag::Var& instance_prompt, const Tensor& class_images, const ag::Var& base_prompt,
                        double lambda, Rng& rng);

// Stateful Dreambooth optimizer over one UNet. Each step draws its own
// randomness from (seed, step index), so runs replay exactly.
class DreamboothTrainer {
public:
    DreamboothTrainer(NoisePredictor& unet, const NoiseSchedule& schedule, PromptEmbedding instance_prompt,
                      PromptEmbedding base_prompt, ImageBatch class_images, double lambda, int batch,
                      OptimizerKind optimizer, double lr, std::uint64_t seed);

    // One update on the given instance pixels; returns L_db. Throws
    // TrainingError on a non-finite loss.
    double step(const Tensor& instance_pixels);
    void train(const Tensor& instance_pixels, int steps);
    int steps_done() const { return steps_done_; }

private:
    NoisePredictor& unet_;
    const NoiseSchedule& schedule_;
    ag::Var instance_prompt_;
    ag::Var base_prompt_;
    ImageBatch class_images_;
    double lambda_;
    int batch_;
    std::unique_ptr<Optimizer> optimizer_;
    std::uint64_t seed_;
    int steps_done_ = 0;
};

// Full-length Dreambooth on a copy of the base UNet.
NoisePredictor dreambooth_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                   const ImageBatch& class_images, const DreamboothConfig& config, std::uint64_t seed,
                                   std::vector<double>* losses = nullptr);

// Low-rank additive update W + scale * B A on every attention projection.
// B starts at zero so a fresh adapter leaves the model unchanged.
class LoraAdapter final : public LinearAdapter {
public:
    LoraAdapter(const NoisePredictor& unet, int rank, double scale, std::uint64_t seed);
    // Restores a saved adapter.
    LoraAdapter(int rank, double scale, ParameterStore params);

    bool covers(const std::string& projection) const override;
    ag::Var delta(const std::string& projection, const ag::Var& x) const override;

    int rank() const { return rank_; }
    double scale() const { return scale_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

private:
    int rank_ = 0;
    double scale_ = 1.0;
    ParameterStore params_;
};

// Trains only adapter factors; the UNet stays frozen.
std::shared_ptr<LoraAdapter> lora_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                           const ImageBatch& class_images, const DreamboothConfig& config,
                                           std::uint64_t seed, std::vector<double>* losses = nullptr);

// Base UNet copy with the adapter attached.
NoisePredictor with_adapter(const NoisePredictor& unet, std::shared_ptr<const LinearAdapter> adapter);

struct TIEmbedding {
    int token_id = 0;
    Tensor row;  // [d]
};

// Learns a replacement embedding row for the keyword; every model and
// encoder parameter stays frozen.
TIEmbedding textual_inversion_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                       const DreamboothConfig& config, std::uint64_t seed,
                                       std::vector<double>* losses = nullptr);

PromptEmbedding encode_with_embedding(const DiffusionModel& model, const std::string& prompt, const TIEmbedding& ti);

}  // namespace cloak
