#pragma once

// Identity embedder and the metric proxies built on it, attention heatmaps
// and optimization-dynamics summaries of attack run logs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cloak/attack.hpp"
#include "cloak/corpus.hpp"
#include "cloak/model.hpp"
#include "cloak/nn.hpp"

namespace cloak {

struct EmbedderConfig {
    int embed_dim = 32;
    int width = 16;
    int steps = 1500;
    int batch = 32;
    double lr = 2e-3;
    // Standard deviation bound of additive Gaussian noise used as augmentation.
    double noise_augment = 0.1;
    double min_accuracy = 0.9;

    void validate() const;
};

// Small CNN: two conv/pool stages, a linear embedding (no activation) and
// a linear classifier head over the training identities.
class Embedder {
public:
    Embedder() = default;
    Embedder(int image_size, std::vector<int> classes, const EmbedderConfig& config, std::uint64_t seed);

    Tensor embed(const Tensor& pixels) const;   // [N, E]
    Tensor logits(const Tensor& pixels) const;  // [N, K]
    Tensor probabilities(const Tensor& pixels) const;
    // Differentiable forward used by training.
    ag::Var forward_logits(const ag::Var& x, ag::Var* embedding = nullptr) const;

    const std::vector<int>& classes() const { return classes_; }
    int class_index(int label) const;
    int image_size() const { return image_size_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    // Leave-one-out 1-NN accuracy recorded at training time.
    double loo_accuracy = 0.0;

private:
    int image_size_ = 0;
    std::vector<int> classes_;
    ParameterStore params_;
};

// Trains on `train`, then measures leave-one-out nearest-neighbour identity
// accuracy (cosine, in embedding space) on `holdout`. Throws TrainingError
// when that accuracy is below config.min_accuracy.
Embedder train_identity_embedder(const ImageBatch& train, const ImageBatch& holdout, const EmbedderConfig& config,
                                 std::uint64_t seed);

// Leave-one-out 1-NN accuracy of `batch` labels under cosine similarity of embeddings.
double loo_accuracy(const Embedder& embedder, const ImageBatch& batch);

double cosine(std::span<const double> a, std::span<const double> b);
// Mean embedding of the reference images.
std::vector<double> mean_embedding(const Embedder& embedder, const Tensor& pixels);

// Mean cosine similarity between generated embeddings and the mean clean
// embedding of the identity. Higher means closer to the identity.
double ism_proxy(const ImageBatch& generated, const ImageBatch& identity_clean, const Embedder& embedder);
// Fraction of samples whose top class probability is below tau.
double fdfr_proxy(const ImageBatch& generated, const Embedder& embedder, double tau);
// Frechet distance between Gaussians fit to embeddings. `jittered` reports
// whether a near-singular covariance received 1e-6 diagonal jitter.
double feature_fid(const ImageBatch& a, const ImageBatch& b, const Embedder& embedder, bool* jittered = nullptr);
double frechet_distance(const Tensor& features_a, const Tensor& features_b, bool* jittered = nullptr);

struct PromptMetrics {
    double ism = 0.0;
    double fdfr = 0.0;
    double fid = 0.0;
    bool fid_jittered = false;
};

struct MetricsReport {
    // Averages over prompts.
    double ism_proxy = 0.0;
    double fdfr_proxy = 0.0;
    double feature_fid = 0.0;
    std::map<std::string, PromptMetrics> per_prompt;
};

struct SamplingConfig {
    int count = 16;
    int ddim_steps = 50;
    std::uint64_t seed = 0;
};

// Generates `sampling.count` images per prompt and scores them against the
// identity's clean references. `samples`, if given, receives the images.
MetricsReport evaluate_generations(const Denoiser& unet, const NoiseSchedule& schedule,
                                   const std::map<std::string, PromptEmbedding>& prompts,
                                   const ImageBatch& identity_clean, const Embedder& embedder,
                                   const SamplingConfig& sampling, double tau, int image_size,
                                   std::map<std::string, ImageBatch>* samples = nullptr);

struct Heatmaps {
    Tensor cross;  // [H, W] in [0, 1]
    Tensor self;
    bool cross_degenerate = false;
    bool self_degenerate = false;
    std::string cross_module;
    std::string self_module;
};

// Min-max normalise to [0, 1]; a constant field becomes zeros and sets `degenerate`.
Tensor minmax_normalize(const Tensor& field, bool* degenerate = nullptr);

// Attention maps of one image noised to step t with a seeded eps. Cross map:
// weight on the keyword token positions; self map: attention each pixel
// receives, averaged over all queries. Both upsampled to the image size.
// Throws ArgumentError when no attention layer runs at `resolution`.
Heatmaps attention_heatmap(const NoisePredictor& unet, const NoiseSchedule& schedule, const Tensor& image,
                           const PromptEmbedding& prompt, const std::vector<int>& keyword_positions, int t,
                           int resolution, std::uint64_t seed = 0);

struct DynamicsSummary {
    int iterations = 0;
    std::vector<double> total_loss;  // L_cond + alpha2 * L_A per iteration
    std::vector<double> cond_score;  // per-iteration mean segment score
    std::vector<double> attn_score;
    double final_loss = 0.0;         // mean over the last 10% of iterations
    double increment_variance = 0.0; // variance of successive total-loss differences
    double score_variance = 0.0;     // variance of cond_score
    double attn_score_variance = 0.0;
};

double variance(std::span<const double> xs);

// Throws ArgumentError on a log without iterations.
DynamicsSummary dynamics_report(const RunLog& log, double alpha2);
// Writes loss and gradient-score plots of one or more labelled runs. Series
// colours and labels go into the PNG text chunks.
void plot_dynamics(const std::filesystem::path& path, const std::vector<std::pair<std::string, DynamicsSummary>>& runs,
                   const std::string& config_hash = "");

}  // namespace cloak
