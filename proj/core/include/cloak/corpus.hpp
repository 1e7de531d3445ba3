#pragma once

// Synthetic identity corpus and the fixed prompt vocabulary.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cloak/tensor.hpp"

namespace cloak {

constexpr int kImageChannels = 3;
constexpr int kIdentityParams = 12;
constexpr int kDefaultImageSize = 32;
constexpr int kDefaultPromptLength = 8;

// Identity parameters, all in [0, 1]:
//   0 background hue    1 background value  2 head x     3 head y
//   4 head radius       5 head hue          6 band offset 7 band thickness
//   8 band hue          9 mark shape       10 mark x     11 mark hue
struct Identity {
    int id = 0;
    std::array<double, kIdentityParams> params{};

    static Identity make(int id, std::uint64_t corpus_seed);
};

// Pixels are [N, 3, H, W] with values in [-1, 1].
struct ImageBatch {
    Tensor pixels;
    std::vector<int> labels;

    int size() const { return pixels.empty() ? 0 : pixels.dim(0); }
    int image_size() const { return pixels.empty() ? 0 : pixels.dim(2); }
    ImageBatch select(std::span<const int> indices) const;
    // Single image as a [3, H, W] tensor.
    Tensor image(int index) const;

    static ImageBatch concat(const ImageBatch& a, const ImageBatch& b);
};

// Throws ConfigError for non-positive or odd sizes.
void validate_image_size(int image_size);

// Renders `count` jittered views of the identity. Pure function of its inputs.
ImageBatch generate_identity_images(const Identity& identity, int count, std::uint64_t render_seed,
                                    int image_size = kDefaultImageSize);

// Even indices form the clean half, odd indices the half to be protected.
std::pair<ImageBatch, ImageBatch> split_clean_perturbed(const ImageBatch& batch);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnknown = 1;

    static const std::vector<std::string>& words();
    static int size() { return static_cast<int>(words().size()); }
    // Unknown words map to kUnknown.
    static int id(std::string_view word);
};

struct PromptTokens {
    std::vector<int> ids;

    int length() const { return static_cast<int>(ids.size()); }
    bool operator==(const PromptTokens&) const = default;
};

// Lower-cases, splits on whitespace, truncates or pads to `length`.
PromptTokens tokenize(std::string_view text, int length = kDefaultPromptLength);

}  // namespace cloak
