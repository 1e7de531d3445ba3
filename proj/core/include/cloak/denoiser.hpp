#pragma once

#include <span>
#include <string>
#include <vector>

#include "cloak/autograd.hpp"

namespace cloak {

enum class AttentionKind { self, cross };

const char* to_string(AttentionKind kind);

// One captured attention layer. `output` is the layer's output projection
// before it is added back to the residual stream; it stays differentiable
// when the forward pass recorded a graph. `probs` holds the attention
// weights [N, queries, keys].
struct AttentionRecord {
    std::string module_id;
    AttentionKind kind = AttentionKind::self;
    int resolution = 0;
    ag::Var output;
    Tensor probs;
};

struct AttentionTrace {
    std::vector<AttentionRecord> entries;

    bool empty() const { return entries.empty(); }
    int count(AttentionKind kind) const;
    std::vector<const AttentionRecord*> of_kind(AttentionKind kind) const;
    std::vector<std::string> module_ids() const;
};

struct Prediction {
    ag::Var noise;
    AttentionTrace trace;
};

// Anything that predicts the noise in x_t. `timesteps` holds one entry per
// sample or a single entry shared by the whole batch. `prompt` is [L, d]
// (shared) or [N, L, d].
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Prediction predict(const ag::Var& x_t, std::span<const int> timesteps, const ag::Var& prompt,
                               bool capture) const = 0;
};

}  // namespace cloak
