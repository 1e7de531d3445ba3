#pragma once

// Two-stage protective perturbation: an adversarial prompt vector first,
// then PGD on the images with a timestep-segment gradient ensemble over
// denoising and attention-disruption losses, alternating with surrogate
// Dreambooth steps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cloak/customize.hpp"
#include "cloak/model.hpp"

namespace cloak {

enum class AttackVariant { dadiff, single_step, cond_only_single_step, cond_only_lrtge, sa_only, ca_only };

const char* to_string(AttackVariant variant);
// Throws ConfigError for unknown names.
AttackVariant variant_from_string(const std::string& name);
std::vector<AttackVariant> all_variants();

struct AttackConfig {
    int T = kDefaultTimesteps;
    int B = 25;
    double alpha1 = 0.5;
    double alpha2 = 0.4;
    int apv_rounds = 500;
    double eta_apv = 0.005;
    int t_out = 50;
    int t_in = 6;
    double omega = 0.05;
    double eta = 0.005;
    // true: J is cosine similarity; false: 1 - cosine.
    bool ca_similarity = true;
    std::uint64_t seed = 0;

    int rounds() const { return t_out * t_in; }
    void validate() const;
};

// Loss wiring after applying a variant to a config.
struct LossWeights {
    int segments = 25;
    double alpha1 = 0.5;
    double alpha2 = 0.4;
    bool attention = true;
    bool ca_similarity = true;

    bool uses_self() const { return attention && alpha1 < 1.0; }
    bool uses_cross() const { return attention && alpha1 > 0.0; }
};

LossWeights resolve_variant(AttackVariant variant, const AttackConfig& config);

// g / sum|g|. An all-zero g yields zeros and sets `degenerate`.
Tensor normalize_l1(const Tensor& g, bool* degenerate = nullptr);

struct APVState {
    PromptEmbedding embedding;
    int iterations_done = 0;
    double lr = 0.005;
    std::uint64_t seed = 0;
    // L_cond before each update.
    std::vector<double> losses;
};

APVState apv_init(const PromptEmbedding& init, double lr, std::uint64_t seed);
// One ascent step with a fresh uniform t. Randomness depends only on
// (seed, iterations_done), so a restored state continues identically.
// Returns the number of consecutive degenerate gradients seen so far.
void apv_step(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& x0, APVState& state,
              int* degenerate_run = nullptr);
// Runs `rounds` further steps; aborts with StageError("apv") after 10
// consecutive zero gradients.
void apv_continue(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& x0, APVState& state, int rounds);
APVState apv_attack(const Denoiser& model, const NoiseSchedule& schedule, const ImageBatch& x0,
                    const PromptEmbedding& init_prompt, int rounds, double eta_apv, std::uint64_t seed);

// Sum over self-attention records of MSE(adv, clean). Clean outputs are
// treated as constants. Throws InternalError if either trace lacks
// self-attention records.
ag::Var self_attn_loss(const AttentionTrace& adv, const AttentionTrace& clean);
// Sum over cross-attention records of the per-sample cosine similarity
// (batch mean), or of 1 - cosine when `similarity` is false.
ag::Var cross_attn_loss(const AttentionTrace& adv, const AttentionTrace& clean, bool similarity = true,
                        int* degenerate = nullptr);
ag::Var attention_loss(const ag::Var& l_sa, const ag::Var& l_ca, double alpha1);
double attention_loss(double l_sa, double l_ca, double alpha1);

// Model-level forms: x_adv_t carries the graph, the clean side runs without one.
ag::Var self_attn_loss(const Denoiser& model, const ag::Var& x_adv_t, const Tensor& x_clean_t, int t,
                       const PromptEmbedding& prompt);
ag::Var cross_attn_loss(const Denoiser& model, const ag::Var& x_adv_t, const Tensor& x_clean_t, int t,
                        const PromptEmbedding& instance_prompt, const APVState& apv, bool similarity = true);

// Draws one timestep in each of the B equal segments of [0, T).
std::vector<int> sample_segment_timesteps(int T, int B, Rng& rng);

struct GradientBundle {
    Tensor g_cond;  // raw sums over segments
    Tensor g_attn;
    Tensor g_cond_normalized;
    Tensor g_attn_normalized;
    Tensor g_total;
    bool cond_degenerate = false;
    bool attn_degenerate = false;
    bool has_attention = false;

    std::vector<int> timesteps;
    // Mean absolute raw gradient per segment.
    std::vector<double> cond_scores;
    std::vector<double> attn_scores;

    // Segment means of the losses.
    double l_cond = 0.0;
    double l_sa = 0.0;
    double l_ca = 0.0;
    double l_a = 0.0;
};

struct AttackInputs {
    const Denoiser* model = nullptr;
    const NoiseSchedule* schedule = nullptr;
    Tensor x0;
    PromptEmbedding instance_prompt;
    // Required when the weights use cross-attention.
    const PromptEmbedding* apv = nullptr;
};

// Gradient ensemble at x0 + delta. All randomness comes from `rng`.
GradientBundle lrtge_gradient(const AttackInputs& inputs, const Tensor& delta, const LossWeights& weights, Rng& rng);

struct PerturbationState {
    Tensor x0;
    Tensor delta;
    double omega = 0.05;
    double eta = 0.005;
    int round = 0;

    static PerturbationState start(Tensor x0, double omega, double eta);
    Tensor adversarial() const;
};

// delta <- clip(delta + eta * sign(g), -omega, omega), then x0 + delta is
// clipped to [-1, 1] and delta recomputed from it. sign(0) = 0.
void pgd_step(PerturbationState& state, const Tensor& g_total);

struct RunLogRow {
    int outer_round = 0;
    int inner_iter = 0;
    std::vector<int> timesteps;
    std::vector<double> cond_scores;
    std::vector<double> attn_scores;
    double l_cond = 0.0;
    double l_sa = 0.0;
    double l_ca = 0.0;
    double l_a = 0.0;
    double delta_linf = 0.0;
};

struct RunLog {
    std::vector<RunLogRow> rows;
};

// CSV with header outer_round,inner_iter,segment_scores_json,L_cond,L_SA,L_CA,L_A,delta_linf.
std::string format_run_log(const RunLog& log);
RunLog parse_run_log(const std::string& text);
void write_run_log(const std::filesystem::path& path, const RunLog& log);
RunLog read_run_log(const std::filesystem::path& path);

struct AttackPrompts {
    std::string instance = "a photo of sks person";
    std::string base = "a photo of person";
};

struct IterationEvent {
    int outer_round;
    int inner_iter;
    const PerturbationState& state;
    const GradientBundle& bundle;
};

struct AttackResult {
    ImageBatch protected_images;
    Tensor delta;
    RunLog log;
    APVState apv;
    bool used_apv = false;
};

using IterationObserver = std::function<void(const IterationEvent&)>;

// Stage 1 (APV) when the variant needs it, then t_out rounds of:
// surrogate DB on clean X, t_in PGD steps, surrogate DB on X + delta.
// Sub-stage failures surface as StageError tagged apv, surrogate or pgd.
AttackResult run_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                        const AttackPrompts& prompts, const DreamboothConfig& db, const AttackConfig& config,
                        AttackVariant variant, const IterationObserver& observer = {});

AttackResult dadiff_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                           const AttackPrompts& prompts, const DreamboothConfig& db, const AttackConfig& config,
                           const IterationObserver& observer = {});
// Rejects the dadiff variant.
AttackResult baseline_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                             const AttackPrompts& prompts, AttackVariant variant, const DreamboothConfig& db,
                             const AttackConfig& config, const IterationObserver& observer = {});

}  // namespace cloak
