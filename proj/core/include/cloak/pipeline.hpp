#pragma once

// Experiment orchestration shared by the command-line tool and the
// end-to-end tests: corpus views, stage seeds, customization and scoring.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cloak/attack.hpp"
#include "cloak/config.hpp"
#include "cloak/customize.hpp"
#include "cloak/eval.hpp"

namespace cloak {

enum class Mechanism { dreambooth, lora, ti };

const char* to_string(Mechanism m);
Mechanism mechanism_from_string(const std::string& name);

// Identities 0..identities-1, `per_id` renders each, grouped by identity.
ImageBatch render_corpus(const CorpusConfig& corpus, std::uint64_t render_seed, int per_id);
// The evaluation corpus (corpus.render_seed, corpus.per_id).
ImageBatch evaluation_corpus(const CorpusConfig& corpus);

struct IdentityData {
    ImageBatch reference;  // clean half, used only for scoring
    ImageBatch target;     // half that gets protected and customized on
};
IdentityData identity_data(const CorpusConfig& corpus, int identity);

// Named stage seeds derived from the experiment seed.
enum class Stage : std::uint64_t { base = 0xBA, embedder = 0xE0, class_images = 0xC1, customize = 0xCD, sample = 0x5A };
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

DiffusionModel build_base_model(const ExperimentConfig& config, std::vector<double>* losses = nullptr);
// Trains on separate renders and measures accuracy on the evaluation corpus.
Embedder build_embedder(const ExperimentConfig& config);

AttackPrompts attack_prompts(const ExperimentConfig& config);

struct CustomizedModel {
    Mechanism mechanism = Mechanism::dreambooth;
    NoisePredictor unet;
    std::shared_ptr<LoraAdapter> lora;
    std::optional<TIEmbedding> ti;
};

CustomizedModel customize(const DiffusionModel& base, const ImageBatch& instance, const ImageBatch& class_images,
                          Mechanism mechanism, const DreamboothConfig& config, std::uint64_t seed,
                          std::vector<double>* losses = nullptr);

// Prompt embeddings as the customized model sees them.
std::map<std::string, PromptEmbedding> customized_prompts(const DiffusionModel& base, const CustomizedModel& model,
                                                          const std::vector<std::string>& prompts);

MetricsReport evaluate_customized(const DiffusionModel& base, const CustomizedModel& model,
                                  const ExperimentConfig& config, const ImageBatch& reference,
                                  const Embedder& embedder, std::uint64_t seed,
                                  std::map<std::string, ImageBatch>* samples = nullptr);

// PNG view of protected pixels: each value is quantized to 16 bits and then
// stepped toward the clean value until it is back inside the omega ball.
Tensor png_safe_pixels(const Tensor& clean, const Tensor& protected_pixels, double omega);

}  // namespace cloak
