#pragma once

// Toy conditional UNet noise predictor, prompt encoder and samplers.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cloak/corpus.hpp"
#include "cloak/denoiser.hpp"
#include "cloak/nn.hpp"
#include "cloak/schedule.hpp"

namespace cloak {

// Which attention layers report into the trace.
enum class CaptureSet { up, all };

struct ModelConfig {
    int image_size = kDefaultImageSize;
    int base_channels = 16;
    int mid_channels = 32;
    int embed_dim = 64;
    int prompt_length = kDefaultPromptLength;
    int time_dim = 32;
    int groups = 4;
    bool mid_attention = true;
    CaptureSet capture = CaptureSet::up;
    std::uint64_t init_seed = 0;

    void validate() const;
};

enum class PromptSource { encoded, adversarial };

struct PromptEmbedding {
    Tensor matrix;  // [L, d]
    PromptSource source = PromptSource::encoded;

    int length() const { return matrix.dim(0); }
    int width() const { return matrix.dim(1); }
};

// Learned token table plus fixed sinusoidal positions.
class PromptEncoder {
public:
    PromptEncoder() = default;
    explicit PromptEncoder(const ModelConfig& config);

    PromptEmbedding encode(const PromptTokens& tokens) const;
    // Differentiable in the token table.
    ag::Var encode_var(const PromptTokens& tokens) const;
    // Rows whose token equals `token_id` take `row` instead of the table entry.
    ag::Var encode_with_row(const PromptTokens& tokens, int token_id, const ag::Var& row) const;

    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const Tensor& positions() const { return positions_; }
    PromptEncoder clone() const;

private:
    int length_ = 0;
    int width_ = 0;
    ParameterStore params_;
    Tensor positions_;
};

// Additive low-rank hook on named linear projections.
class LinearAdapter {
public:
    virtual ~LinearAdapter() = default;
    virtual bool covers(const std::string& projection) const = 0;
    virtual ag::Var delta(const std::string& projection, const ag::Var& x) const = 0;
};

class NoisePredictor final : public Denoiser {
public:
    NoisePredictor() = default;
    explicit NoisePredictor(const ModelConfig& config);

    Prediction predict(const ag::Var& x_t, std::span<const int> timesteps, const ag::Var& prompt,
                       bool capture) const override;
    Prediction predict(const ag::Var& x_t, int t, const ag::Var& prompt, bool capture) const;

    const ModelConfig& config() const { return config_; }
    void set_capture(CaptureSet set) { config_.capture = set; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    // Names of the attention projections an adapter may hook.
    std::vector<std::string> attention_projections() const;
    std::vector<std::pair<std::string, Shape>> projection_shapes() const;
    void attach_adapter(std::shared_ptr<const LinearAdapter> adapter) { adapter_ = std::move(adapter); }
    const std::shared_ptr<const LinearAdapter>& adapter() const { return adapter_; }

    // Deep copy of parameters; the adapter pointer is shared.
    NoisePredictor clone() const;

private:
    struct Context;
    ag::Var res_block(const ag::Var& x, const ag::Var& temb_act, const std::string& name, int cin, int cout) const;
    ag::Var self_attention(const ag::Var& x, const std::string& name, bool tap, Context& ctx) const;
    ag::Var cross_attention(const ag::Var& x, const ag::Var& prompt, const std::string& name, bool tap,
                            Context& ctx) const;
    ag::Var project(const std::string& name, const ag::Var& x, bool bias) const;
    ag::Var time_embedding(std::span<const int> timesteps, int batch) const;

    ModelConfig config_;
    ParameterStore params_;
    std::shared_ptr<const LinearAdapter> adapter_;
};

// Encoder, UNet and schedule travelling together (one checkpoint).
struct DiffusionModel {
    ModelConfig config;
    NoiseSchedule schedule;
    PromptEncoder encoder;
    NoisePredictor unet;

    static DiffusionModel create(const ModelConfig& config, const NoiseSchedule& schedule);
    DiffusionModel clone() const;
    PromptEmbedding encode(const std::string& prompt) const;
};

// Ancestral DDPM over all T steps; x0 predictions are clipped each step and
// the result is clipped to [-1, 1].
ImageBatch sample_ddpm(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int count,
                       std::uint64_t seed, int image_size);

// Evenly strided subsequence [0, s, 2s, ..., T - s]; steps must divide T.
std::vector<int> ddim_timesteps(int T, int steps);

// Deterministic (eta = 0) DDIM from `start` [N, 3, H, W]. x0 predictions are
// clipped to [-1, 1] each step (eps re-derived from the clipped x0).
ImageBatch sample_ddim(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int steps,
                       const Tensor& start);
// Convenience: start from seeded Gaussian noise.
ImageBatch sample_ddim(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int steps,
                       int count, std::uint64_t seed, int image_size);

// Runs the DDIM trajectory backwards from the images to noise.
Tensor ddim_invert(const Denoiser& model, const NoiseSchedule& schedule, const ImageBatch& images,
                   const PromptEmbedding& prompt, int steps);

}  // namespace cloak
