#include "cloak/model.hpp"

#include <cmath>

#include "cloak/errors.hpp"

namespace cloak {

namespace {

Tensor ones(int n) { return Tensor({n}, 1.0); }
Tensor zeros(int n) { return Tensor({n}, 0.0); }

void add_conv(ParameterStore& p, const std::string& name, int cin, int cout, int k, Rng& rng, double gain = 1.0) {
    p.add(name + ".w", init_fan_in({cout, cin, k, k}, cin * k * k, rng, gain));
    p.add(name + ".b", zeros(cout));
}

void add_linear(ParameterStore& p, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
    p.add(name + ".w", init_fan_in({out, in}, in, rng));
    if (bias) p.add(name + ".b", zeros(out));
}

void add_norm(ParameterStore& p, const std::string& name, int c) {
    p.add(name + ".g", ones(c));
    p.add(name + ".b", zeros(c));
}

Tensor sinusoidal_positions(int length, int width) {
    Tensor pos({length, width});
    for (int i = 0; i < length; ++i)
        for (int j = 0; j < width; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / width);
            pos[static_cast<std::size_t>(i) * width + j] = (j % 2 == 0) ? std::sin(i * freq) : std::cos(i * freq);
        }
    return pos;
}

}  // namespace

void ModelConfig::validate() const {
    validate_image_size(image_size);
    if (image_size % 4 != 0) throw ConfigError("model image size must be divisible by 4");
    if (base_channels < 1 || mid_channels < 1 || embed_dim < 1 || prompt_length < 1 || time_dim < 2 ||
        time_dim % 2 != 0)
        throw ConfigError("model widths must be positive (time_dim even)");
    if (groups < 1 || base_channels % groups != 0 || mid_channels % groups != 0 ||
        (base_channels + mid_channels) % groups != 0)
        throw ConfigError("group count must divide every channel width");
}

PromptEncoder::PromptEncoder(const ModelConfig& config)
    : length_(config.prompt_length), width_(config.embed_dim),
      positions_(sinusoidal_positions(config.prompt_length, config.embed_dim)) {
    Rng rng(derive_seed(config.init_seed, 0xE1));
    params_.add("tokens", randn({Vocabulary::size(), width_}, rng));
}

PromptEmbedding PromptEncoder::encode(const PromptTokens& tokens) const {
    ag::NoGradGuard guard;
    return {encode_var(tokens).value(), PromptSource::encoded};
}

ag::Var PromptEncoder::encode_var(const PromptTokens& tokens) const {
    if (tokens.length() != length_)
        throw ArgumentError("prompt has " + std::to_string(tokens.length()) + " tokens, encoder expects " +
                            std::to_string(length_));
    return ag::add(ag::gather_rows(params_.get("tokens"), tokens.ids), ag::constant(positions_));
}

ag::Var PromptEncoder::encode_with_row(const PromptTokens& tokens, int token_id, const ag::Var& row) const {
    std::vector<int> hits;
    for (int i = 0; i < tokens.length(); ++i)
        if (tokens.ids[i] == token_id) hits.push_back(i);
    const ag::Var base = ag::gather_rows(params_.get("tokens"), tokens.ids);
    return ag::add(ag::replace_rows(base, row, hits), ag::constant(positions_));
}

PromptEncoder PromptEncoder::clone() const {
    PromptEncoder out;
    out.length_ = length_;
    out.width_ = width_;
    out.params_ = params_.clone();
    out.positions_ = positions_;
    return out;
}

struct NoisePredictor::Context {
    bool capture = false;
    AttentionTrace trace;
};

NoisePredictor::NoisePredictor(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(config.init_seed, 0xA7));
    const int c0 = config.base_channels, c1 = config.mid_channels, td = config.time_dim;
    ParameterStore& p = params_;
    add_linear(p, "time.l1", td, td, rng);
    add_linear(p, "time.l2", td, td, rng);
    add_conv(p, "in", kImageChannels, c0, 3, rng);

    auto res = [&](const std::string& name, int cin, int cout) {
        add_norm(p, name + ".gn1", cin);
        add_conv(p, name + ".conv1", cin, cout, 3, rng);
        add_linear(p, name + ".temb", td, cout, rng);
        add_norm(p, name + ".gn2", cout);
        add_conv(p, name + ".conv2", cout, cout, 3, rng);
        if (cin != cout) add_conv(p, name + ".skip", cin, cout, 1, rng);
    };
    auto attn = [&](const std::string& name, int c, int ctx) {
        add_norm(p, name + ".ln", c);
        add_linear(p, name + ".q", c, c, rng, false);
        add_linear(p, name + ".k", ctx, c, rng, false);
        add_linear(p, name + ".v", ctx, c, rng, false);
        add_linear(p, name + ".out", c, c, rng);
    };
    res("down0", c0, c0);
    res("down1", c0, c1);
    res("mid", c1, c1);
    if (config.mid_attention) {
        attn("mid.self", c1, c1);
        attn("mid.cross", c1, config.embed_dim);
    }
    res("up1", 2 * c1, c1);
    attn("up1.self", c1, c1);
    attn("up1.cross", c1, config.embed_dim);
    res("up0", c1 + c0, c0);
    attn("up0.self", c0, c0);
    attn("up0.cross", c0, config.embed_dim);
    add_norm(p, "out.gn", c0);
    add_conv(p, "out", c0, kImageChannels, 3, rng, 0.1);
}

NoisePredictor NoisePredictor::clone() const {
    NoisePredictor out;
    out.config_ = config_;
    out.params_ = params_.clone();
    out.adapter_ = adapter_;
    return out;
}

std::vector<std::string> NoisePredictor::attention_projections() const {
    std::vector<std::string> out;
    for (const auto& [name, shape] : projection_shapes()) out.push_back(name);
    return out;
}

std::vector<std::pair<std::string, Shape>> NoisePredictor::projection_shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& [name, v] : params_.all()) {
        if (name.size() < 2 || name.substr(name.size() - 2) != ".w") continue;
        if (name.find(".self.") == std::string::npos && name.find(".cross.") == std::string::npos) continue;
        out.emplace_back(name.substr(0, name.size() - 2), v.shape());
    }
    return out;
}

ag::Var NoisePredictor::project(const std::string& name, const ag::Var& x, bool bias) const {
    ag::Var y = ag::linear(x, params_.get(name + ".w"), bias ? params_.get(name + ".b") : ag::Var());
    if (adapter_ && adapter_->covers(name)) y = ag::add(y, adapter_->delta(name, x));
    return y;
}

ag::Var NoisePredictor::time_embedding(std::span<const int> timesteps, int batch) const {
    const int td = config_.time_dim;
    const int half = td / 2;
    Tensor emb({batch, td});
    for (int n = 0; n < batch; ++n) {
        const double t = timesteps.size() == 1 ? timesteps[0] : timesteps[n];
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            emb[static_cast<std::size_t>(n) * td + i] = std::sin(t * freq);
            emb[static_cast<std::size_t>(n) * td + half + i] = std::cos(t * freq);
        }
    }
    ag::Var h = ag::linear(ag::constant(std::move(emb)), params_.get("time.l1.w"), params_.get("time.l1.b"));
    h = ag::linear(ag::silu(h), params_.get("time.l2.w"), params_.get("time.l2.b"));
    return ag::silu(h);
}

ag::Var NoisePredictor::res_block(const ag::Var& x, const ag::Var& temb_act, const std::string& name, int cin,
                                  int cout) const {
    const int g = config_.groups;
    ag::Var h = ag::group_norm(x, params_.get(name + ".gn1.g"), params_.get(name + ".gn1.b"), g);
    h = ag::conv2d(ag::silu(h), params_.get(name + ".conv1.w"), params_.get(name + ".conv1.b"), 1, 1);
    h = ag::add_channel_embedding(
        h, ag::linear(temb_act, params_.get(name + ".temb.w"), params_.get(name + ".temb.b")));
    h = ag::group_norm(h, params_.get(name + ".gn2.g"), params_.get(name + ".gn2.b"), g);
    h = ag::conv2d(ag::silu(h), params_.get(name + ".conv2.w"), params_.get(name + ".conv2.b"), 1, 1);
    const ag::Var skip =
        cin == cout ? x : ag::conv2d(x, params_.get(name + ".skip.w"), params_.get(name + ".skip.b"), 1, 0);
    return ag::add(h, skip);
}

ag::Var NoisePredictor::self_attention(const ag::Var& x, const std::string& name, bool tap, Context& ctx) const {
    const int H = x.value().dim(2), W = x.value().dim(3);
    const ag::Var tokens = ag::to_tokens(x);
    const ag::Var h = ag::layer_norm(tokens, params_.get(name + ".ln.g"), params_.get(name + ".ln.b"));
    Tensor probs;
    const ag::Var a = ag::attention(project(name + ".q", h, false), project(name + ".k", h, false),
                                    project(name + ".v", h, false), tap ? &probs : nullptr);
    const ag::Var o = project(name + ".out", a, true);
    if (tap) ctx.trace.entries.push_back({name, AttentionKind::self, H, o, std::move(probs)});
    return ag::add(x, ag::from_tokens(o, H, W));
}

ag::Var NoisePredictor::cross_attention(const ag::Var& x, const ag::Var& prompt, const std::string& name, bool tap,
                                        Context& ctx) const {
    const int N = x.value().dim(0), H = x.value().dim(2), W = x.value().dim(3);
    const ag::Var tokens = ag::to_tokens(x);
    const ag::Var h = ag::layer_norm(tokens, params_.get(name + ".ln.g"), params_.get(name + ".ln.b"));
    ag::Var k = project(name + ".k", prompt, false);
    ag::Var v = project(name + ".v", prompt, false);
    if (prompt.value().rank() == 2) {
        k = ag::repeat_batch(k, N);
        v = ag::repeat_batch(v, N);
    }
    Tensor probs;
    const ag::Var a = ag::attention(project(name + ".q", h, false), k, v, tap ? &probs : nullptr);
    const ag::Var o = project(name + ".out", a, true);
    if (tap) ctx.trace.entries.push_back({name, AttentionKind::cross, H, o, std::move(probs)});
    return ag::add(x, ag::from_tokens(o, H, W));
}

Prediction NoisePredictor::predict(const ag::Var& x_t, int t, const ag::Var& prompt, bool capture) const {
    const int ts[1] = {t};
    return predict(x_t, std::span<const int>(ts, 1), prompt, capture);
}

Prediction NoisePredictor::predict(const ag::Var& x_t, std::span<const int> timesteps, const ag::Var& prompt,
                                   bool capture) const {
    const Tensor& xv = x_t.value();
    if (xv.rank() != 4 || xv.dim(1) != kImageChannels || xv.dim(2) != config_.image_size ||
        xv.dim(3) != config_.image_size)
        throw ArgumentError("predict: input " + shape_str(xv.shape()) + " does not match model image size " +
                            std::to_string(config_.image_size));
    const int N = xv.dim(0);
    if (timesteps.size() != 1 && timesteps.size() != static_cast<std::size_t>(N))
        throw ArgumentError("predict: need one timestep or one per sample");
    for (int t : timesteps)
        if (t < 0) throw ArgumentError("predict: negative timestep " + std::to_string(t));
    const Tensor& pv = prompt.value();
    const bool shared_prompt = pv.rank() == 2;
    if (!(shared_prompt || (pv.rank() == 3 && pv.dim(0) == N)) || pv.dim(-1) != config_.embed_dim ||
        pv.dim(-2) != config_.prompt_length)
        throw ArgumentError("predict: prompt " + shape_str(pv.shape()) + " does not match encoder output [" +
                            std::to_string(config_.prompt_length) + "," + std::to_string(config_.embed_dim) + "]");

    Context ctx;
    ctx.capture = capture;
    const bool tap_all = capture && config_.capture == CaptureSet::all;
    const int c0 = config_.base_channels, c1 = config_.mid_channels;

    const ag::Var temb = time_embedding(timesteps, N);
    ag::Var h = ag::conv2d(x_t, params_.get("in.w"), params_.get("in.b"), 1, 1);
    const ag::Var skip0 = res_block(h, temb, "down0", c0, c0);
    const ag::Var skip1 = res_block(ag::avg_pool2(skip0), temb, "down1", c0, c1);
    h = res_block(ag::avg_pool2(skip1), temb, "mid", c1, c1);
    if (config_.mid_attention) {
        h = self_attention(h, "mid.self", tap_all, ctx);
        h = cross_attention(h, prompt, "mid.cross", tap_all, ctx);
    }
    h = res_block(ag::concat_channels(ag::upsample_nearest2(h), skip1), temb, "up1", 2 * c1, c1);
    h = self_attention(h, "up1.self", capture, ctx);
    h = cross_attention(h, prompt, "up1.cross", capture, ctx);
    h = res_block(ag::concat_channels(ag::upsample_nearest2(h), skip0), temb, "up0", c1 + c0, c0);
    h = self_attention(h, "up0.self", capture, ctx);
    h = cross_attention(h, prompt, "up0.cross", capture, ctx);
    h = ag::group_norm(h, params_.get("out.gn.g"), params_.get("out.gn.b"), config_.groups);
    h = ag::conv2d(ag::silu(h), params_.get("out.w"), params_.get("out.b"), 1, 1);
    return {h, std::move(ctx.trace)};
}

DiffusionModel DiffusionModel::create(const ModelConfig& config, const NoiseSchedule& schedule) {
    config.validate();
    return {config, schedule, PromptEncoder(config), NoisePredictor(config)};
}

DiffusionModel DiffusionModel::clone() const { return {config, schedule, encoder.clone(), unet.clone()}; }

PromptEmbedding DiffusionModel::encode(const std::string& prompt) const {
    return encoder.encode(tokenize(prompt, config.prompt_length));
}

namespace {

Tensor predict_eps(const Denoiser& model, const Tensor& x, int t, const ag::Var& prompt) {
    const int ts[1] = {t};
    return model.predict(ag::constant(x), std::span<const int>(ts, 1), prompt, false).noise.value();
}

void clip_unit(Tensor& x) {
    for (double& v : x.values()) v = std::clamp(v, -1.0, 1.0);
}

ImageBatch to_batch(Tensor pixels) {
    const int n = pixels.dim(0);
    return {std::move(pixels), std::vector<int>(n, -1)};
}

}  // namespace

ImageBatch sample_ddpm(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int count,
                       std::uint64_t seed, int image_size) {
    if (count < 1) throw ArgumentError("sample count must be positive");
    ag::NoGradGuard guard;
    Rng rng(derive_seed(seed, 0xDD));
    const ag::Var p = ag::constant(prompt.matrix);
    Tensor x = randn({count, kImageChannels, image_size, image_size}, rng);
    for (int t = schedule.T - 1; t >= 0; --t) {
        const Tensor eps = predict_eps(model, x, t, p);
        const double ab = schedule.alpha_bars[t];
        const double ab_prev = t > 0 ? schedule.alpha_bars[t - 1] : 1.0;
        const double beta = schedule.betas[t];
        // Posterior mean from the clipped x0 estimate.
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab);
        const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
        const Tensor z = t > 0 ? randn(x.shape(), rng) : Tensor(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double x0 = std::clamp((x[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab), -1.0, 1.0);
            x[i] = c0 * x0 + ct * x[i] + std::sqrt(var) * z[i];
        }
    }
    clip_unit(x);
    return to_batch(std::move(x));
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || T % steps != 0)
        throw ArgumentError("DDIM steps (" + std::to_string(steps) + ") must divide T (" + std::to_string(T) + ")");
    const int stride = T / steps;
    std::vector<int> out(steps);
    for (int i = 0; i < steps; ++i) out[i] = i * stride;
    return out;
}

ImageBatch sample_ddim(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int steps,
                       const Tensor& start) {
    const std::vector<int> seq = ddim_timesteps(schedule.T, steps);
    ag::NoGradGuard guard;
    const ag::Var p = ag::constant(prompt.matrix);
    Tensor x = start;
    for (int i = steps - 1; i >= 0; --i) {
        const int t = seq[i];
        const double ab = schedule.alpha_bars[t];
        const double ab_prev = i > 0 ? schedule.alpha_bars[seq[i - 1]] : 1.0;
        const Tensor eps = predict_eps(model, x, t, p);
        for (std::size_t j = 0; j < x.numel(); ++j) {
            // Clipped x0, with eps re-derived so the update stays on the trajectory.
            const double x0 = std::clamp((x[j] - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab), -1.0, 1.0);
            const double e = (x[j] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
            x[j] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
        }
    }
    clip_unit(x);
    return to_batch(std::move(x));
}

ImageBatch sample_ddim(const Denoiser& model, const NoiseSchedule& schedule, const PromptEmbedding& prompt, int steps,
                       int count, std::uint64_t seed, int image_size) {
    if (count < 1) throw ArgumentError("sample count must be positive");
    Rng rng(derive_seed(seed, 0xD1));
    return sample_ddim(model, schedule, prompt, steps, randn({count, kImageChannels, image_size, image_size}, rng));
}

Tensor ddim_invert(const Denoiser& model, const NoiseSchedule& schedule, const ImageBatch& images,
                   const PromptEmbedding& prompt, int steps) {
    const std::vector<int> seq = ddim_timesteps(schedule.T, steps);
    ag::NoGradGuard guard;
    const ag::Var p = ag::constant(prompt.matrix);
    Tensor x = images.pixels;
    for (int i = 0; i < steps; ++i) {
        const int t_prev = i > 0 ? seq[i - 1] : 0;
        const double ab_prev = i > 0 ? schedule.alpha_bars[seq[i - 1]] : 1.0;
        const double ab = schedule.alpha_bars[seq[i]];
        const Tensor eps = predict_eps(model, x, t_prev, p);
        for (std::size_t j = 0; j < x.numel(); ++j) {
            const double x0 = (x[j] - std::sqrt(1.0 - ab_prev) * eps[j]) / std::sqrt(ab_prev);
            x[j] = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps[j];
        }
    }
    return x;
}

}  // namespace cloak
