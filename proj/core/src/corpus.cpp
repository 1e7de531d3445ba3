#include "cloak/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "cloak/errors.hpp"
#include "cloak/rng.hpp"

namespace cloak {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Rgb o{0, 0, 0};
    switch (static_cast<int>(hp) % 6) {
        case 0: o = {c, x, 0}; break;
        case 1: o = {x, c, 0}; break;
        case 2: o = {0, c, x}; break;
        case 3: o = {0, x, c}; break;
        case 4: o = {x, 0, c}; break;
        default: o = {c, 0, x}; break;
    }
    const double m = v - c;
    return {o.r + m, o.g + m, o.b + m};
}

struct Jitter {
    double dx, dy, hue;
};

// Colour of the sprite composition at normalised coordinates (u, v).
Rgb shade(const Identity& id, const Jitter& j, double u, double v) {
    const auto& p = id.params;
    Rgb c = hsv(p[0] + j.hue, 0.35, 0.3 + 0.4 * p[1]);
    const double cx = 0.35 + 0.3 * p[2] + j.dx;
    const double cy = 0.38 + 0.24 * p[3] + j.dy;
    const double rx = 0.17 + 0.1 * p[4];
    const double ry = rx * 1.15;
    const double ex = (u - cx) / rx, ey = (v - cy) / ry;
    if (ex * ex + ey * ey <= 1.0) c = hsv(p[5], 0.55, 0.9);

    const double band_y = cy + (p[6] - 0.5) * 1.2 * ry;
    const double band_h = 0.03 + 0.06 * p[7];
    if (std::abs(v - band_y) <= band_h && std::abs(u - cx) <= rx * 1.25) c = hsv(p[8], 0.75, 0.55);

    const double mx = cx + (p[10] - 0.5) * rx;
    const double my = cy + 0.45 * ry;
    const double ms = 0.06;
    const bool in_mark = p[9] < 0.5 ? (std::abs(u - mx) <= ms && std::abs(v - my) <= ms)
                                    : ((u - mx) * (u - mx) + (v - my) * (v - my) <= ms * ms * 1.3);
    if (in_mark) c = hsv(p[11], 0.8, 0.35 + 0.5 * p[11]);
    return c;
}

}  // namespace

Identity Identity::make(int id, std::uint64_t corpus_seed) {
    if (id < 0) throw ArgumentError("identity id must be non-negative");
    Rng rng(derive_seed(corpus_seed, 0x1D, static_cast<std::uint64_t>(id)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Identity out;
    out.id = id;
    for (double& v : out.params) v = u(rng);
    return out;
}

ImageBatch ImageBatch::select(std::span<const int> indices) const {
    const int n = static_cast<int>(indices.size());
    Shape s = pixels.shape();
    s[0] = n;
    ImageBatch out{Tensor(s), {}};
    const std::size_t per = pixels.numel() / pixels.dim(0);
    for (int i = 0; i < n; ++i) {
        if (indices[i] < 0 || indices[i] >= size()) throw ArgumentError("image index out of range");
        std::copy_n(pixels.data() + indices[i] * per, per, out.pixels.data() + i * per);
        out.labels.push_back(labels[indices[i]]);
    }
    return out;
}

Tensor ImageBatch::image(int index) const {
    if (index < 0 || index >= size()) throw ArgumentError("image index out of range");
    const std::size_t per = pixels.numel() / pixels.dim(0);
    std::vector<double> d(pixels.data() + index * per, pixels.data() + (index + 1) * per);
    return Tensor({pixels.dim(1), pixels.dim(2), pixels.dim(3)}, std::move(d));
}

ImageBatch ImageBatch::concat(const ImageBatch& a, const ImageBatch& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    if (a.pixels.dim(1) != b.pixels.dim(1) || a.pixels.dim(2) != b.pixels.dim(2) || a.pixels.dim(3) != b.pixels.dim(3))
        throw ArgumentError("cannot concatenate image batches of different geometry");
    Shape s = a.pixels.shape();
    s[0] = a.size() + b.size();
    Tensor d(s);
    std::copy(a.pixels.values().begin(), a.pixels.values().end(), d.data());
    std::copy(b.pixels.values().begin(), b.pixels.values().end(), d.data() + a.pixels.numel());
    std::vector<int> labels(a.labels);
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    return {std::move(d), std::move(labels)};
}

void validate_image_size(int image_size) {
    if (image_size <= 0 || image_size % 2 != 0)
        throw ConfigError("image size must be a positive even number, got " + std::to_string(image_size));
}

ImageBatch generate_identity_images(const Identity& identity, int count, std::uint64_t render_seed, int image_size) {
    validate_image_size(image_size);
    if (count < 1) throw ArgumentError("count must be at least 1");
    const int S = image_size;
    ImageBatch out{Tensor({count, kImageChannels, S, S}), std::vector<int>(count, identity.id)};
    constexpr int kSuper = 2;
    for (int n = 0; n < count; ++n) {
        Rng rng(derive_seed(render_seed, static_cast<std::uint64_t>(identity.id), static_cast<std::uint64_t>(n)));
        std::uniform_real_distribution<double> pix(-2.0, 2.0);
        std::uniform_real_distribution<double> hue(-0.03, 0.03);
        Jitter j{};
        j.dx = pix(rng) / S;
        j.dy = pix(rng) / S;
        j.hue = hue(rng);
        double* base = out.pixels.data() + static_cast<std::size_t>(n) * kImageChannels * S * S;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                Rgb acc{0, 0, 0};
                for (int sy = 0; sy < kSuper; ++sy)
                    for (int sx = 0; sx < kSuper; ++sx) {
                        const double u = (x + (sx + 0.5) / kSuper) / S;
                        const double v = (y + (sy + 0.5) / kSuper) / S;
                        const Rgb c = shade(identity, j, u, v);
                        acc.r += c.r;
                        acc.g += c.g;
                        acc.b += c.b;
                    }
                const double inv = 1.0 / (kSuper * kSuper);
                const std::size_t o = static_cast<std::size_t>(y) * S + x;
                base[o] = std::clamp(2.0 * acc.r * inv - 1.0, -1.0, 1.0);
                base[S * S + o] = std::clamp(2.0 * acc.g * inv - 1.0, -1.0, 1.0);
                base[2 * S * S + o] = std::clamp(2.0 * acc.b * inv - 1.0, -1.0, 1.0);
            }
    }
    return out;
}

std::pair<ImageBatch, ImageBatch> split_clean_perturbed(const ImageBatch& batch) {
    if (batch.size() % 2 != 0) throw ArgumentError("split_clean_perturbed needs an even batch size");
    std::vector<int> even, odd;
    for (int i = 0; i < batch.size(); ++i) (i % 2 == 0 ? even : odd).push_back(i);
    return {batch.select(even), batch.select(odd)};
}

const std::vector<std::string>& Vocabulary::words() {
    static const std::vector<std::string> kWords = {
        "<pad>", "<unk>", "a",      "photo", "dslr", "portrait", "of",    "person", "sks", "asdf",
        "looking", "mirror", "chair", "sitting", "on", "the",      "at",    "in",     "front", "tower"};
    return kWords;
}

int Vocabulary::id(std::string_view word) {
    const auto& w = words();
    for (int i = 2; i < static_cast<int>(w.size()); ++i)
        if (w[i] == word) return i;
    return kUnknown;
}

PromptTokens tokenize(std::string_view text, int length) {
    if (length < 1) throw ArgumentError("prompt length must be positive");
    PromptTokens out;
    out.ids.assign(length, Vocabulary::kPad);
    std::string lowered(text);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream is(lowered);
    std::string word;
    int pos = 0;
    while (is >> word && pos < length) out.ids[pos++] = Vocabulary::id(word);
    return out;
}

}  // namespace cloak
