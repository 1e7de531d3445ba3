#pragma once

// Experiment configuration: JSON in, validated struct out, canonical hash.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cloak/attack.hpp"
#include "cloak/customize.hpp"
#include "cloak/eval.hpp"
#include "cloak/model.hpp"

namespace cloak {

struct CorpusConfig {
    std::uint64_t seed = 7;
    int identities = 16;
    int per_id = 8;
    int image_size = kDefaultImageSize;
    std::uint64_t render_seed = 0;
    // Separate renders used to train the identity embedder.
    std::uint64_t embedder_render_seed = 1;
    int embedder_per_id = 24;
};

struct ScheduleConfig {
    int T = kDefaultTimesteps;
    double beta_start = kDefaultBetaStart;
    double beta_end = kDefaultBetaEnd;
};

struct EvalConfig {
    double tau = 0.5;
    int samples = 16;
    int ddim_steps = 50;
    int heatmap_t = 500;
    int heatmap_resolution = 16;
    // Identity whose images are protected and customized.
    int identity = 0;
    std::vector<std::string> prompts = {"a photo of sks person", "a dslr portrait of sks person"};
    EmbedderConfig embedder;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir;
    CorpusConfig corpus;
    ScheduleConfig schedule;
    ModelConfig model;
    BaseTrainConfig base;
    DreamboothConfig dreambooth;
    AttackConfig attack;
    EvalConfig eval;

    // Throws ConfigError listing every offending field.
    void validate() const;
    // Canonical JSON of every result-affecting field (output_dir excluded).
    std::string canonical_json() const;
    // SHA-256 of canonical_json().
    std::string hash() const;
    NoiseSchedule build_schedule() const;
};

// Default output root: $CLOAK_OUTPUT_ROOT, else "runs".
std::filesystem::path default_output_root();

// Parses JSON text; missing fields take defaults, unknown fields are errors.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Full JSON including output_dir.
std::string config_to_json(const ExperimentConfig& config);

}  // namespace cloak
