#pragma once

// Checkpoints for models, adapters, learned embeddings and adversarial
// prompt vectors, stored as array archives with a JSON manifest.

#include <filesystem>
#include <memory>
#include <string>

#include "cloak/attack.hpp"
#include "cloak/customize.hpp"
#include "cloak/eval.hpp"
#include "cloak/io.hpp"
#include "cloak/model.hpp"

namespace cloak {

// "encoder.<name>" and "unet.<name>" arrays.
ArrayMap model_arrays(const DiffusionModel& model);
std::string model_digest(const DiffusionModel& model);

ArchiveManifest save_model(const fs::path& stem, const DiffusionModel& model, const std::string& config_hash);
DiffusionModel load_model(const fs::path& stem, ArchiveManifest* manifest = nullptr);

// Replaces the UNet parameters of a model with those of a fine-tuned copy.
ArchiveManifest save_unet(const fs::path& stem, const NoisePredictor& unet, const std::string& config_hash);
void load_unet_into(const fs::path& stem, NoisePredictor& unet);

ArchiveManifest save_lora(const fs::path& stem, const LoraAdapter& adapter, const std::string& config_hash);
std::shared_ptr<LoraAdapter> load_lora(const fs::path& stem);

ArchiveManifest save_ti(const fs::path& stem, const TIEmbedding& ti, const std::string& config_hash);
TIEmbedding load_ti(const fs::path& stem);

// Records r', the step size and the seed so a loaded state resumes exactly.
ArchiveManifest save_apv(const fs::path& stem, const APVState& apv, const std::string& config_hash);
APVState load_apv(const fs::path& stem);

ArchiveManifest save_embedder(const fs::path& stem, const Embedder& embedder, const EmbedderConfig& config,
                              const std::string& config_hash);
Embedder load_embedder(const fs::path& stem);

}  // namespace cloak
