#include "cloak/customize.hpp"

#include <cmath>
#include <sstream>

#include "cloak/checkpoint.hpp"
#include "cloak/errors.hpp"
#include "cloak/io.hpp"

namespace cloak {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void DreamboothConfig::validate() const {
    if (!(lr > 0.0) || !(surrogate_lr > 0.0) || !(lora_lr > 0.0) || !(ti_lr > 0.0))
        throw ConfigError("dreambooth learning rates must be positive");
    if (steps < 1 || surrogate_steps < 1) throw ConfigError("dreambooth steps must be >= 1");
    if (!(lambda >= 0.0)) throw ConfigError("dreambooth lambda must be >= 0");
    if (batch < 1 || class_image_count < 1) throw ConfigError("dreambooth batch and class_image_count must be >= 1");
    if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
    if (class_sample_steps < 1) throw ConfigError("class_sample_steps must be >= 1");
}

void BaseTrainConfig::validate() const {
    if (steps < 0 || batch < 1 || !(lr > 0.0)) throw ConfigError("base training needs steps >= 0, batch >= 1, lr > 0");
    if (identity_offset < 0 || identity_count < 1) throw ConfigError("base identity pool must be non-empty");
    if (prompts.empty()) throw ConfigError("base training needs at least one prompt");
}

namespace {

void check_finite(double loss, const char* stage, int step) {
    if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << stage << ": non-finite loss " << loss << " at step " << step;
        throw TrainingError(msg.str());
    }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, std::vector<ag::Var> params, double lr) {
    if (kind == OptimizerKind::sgd) return std::make_unique<Sgd>(std::move(params), lr);
    return std::make_unique<Adam>(std::move(params), lr);
}

std::vector<int> draw_timesteps(int n, int T, Rng& rng) {
    std::vector<int> t(n);
    for (int& v : t) v = uniform_int(rng, 0, T);
    return t;
}

// Up to `batch` distinct rows, or all of them.
Tensor pick_rows(const Tensor& pixels, int batch, Rng& rng) {
    const int n = pixels.dim(0);
    if (batch >= n) return pixels;
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < batch; ++i) std::swap(idx[i], idx[uniform_int(rng, i, n)]);
    Shape shape = pixels.shape();
    shape[0] = batch;
    Tensor out(shape);
    const std::size_t per = pixels.numel() / n;
    for (int i = 0; i < batch; ++i)
        std::copy(pixels.data() + idx[i] * per, pixels.data() + (idx[i] + 1) * per, out.data() + i * per);
    return out;
}

}  // namespace

DiffusionModel train_base_model(const ModelConfig& model_config, const NoiseSchedule& schedule,
                                const BaseTrainConfig& config, std::uint64_t corpus_seed, std::uint64_t seed,
                                std::vector<double>* losses) {
    config.validate();
    DiffusionModel model = DiffusionModel::create(model_config, schedule);
    std::vector<PromptTokens> prompts;
    for (const auto& p : config.prompts) prompts.push_back(tokenize(p, model_config.prompt_length));
    std::vector<Identity> pool;
    for (int i = 0; i < config.identity_count; ++i) pool.push_back(Identity::make(config.identity_offset + i, corpus_seed));

    std::vector<ag::Var> params = model.unet.params().vars();
    for (const auto& v : model.encoder.params().vars()) params.push_back(v);
    Adam opt(params, config.lr);
    for (int step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(seed, 0xBA5E, step));
        ImageBatch batch;
        std::vector<ag::Var> rows;
        for (int i = 0; i < config.batch; ++i) {
            const Identity& id = pool[uniform_int(rng, 0, config.identity_count)];
            const ImageBatch one = generate_identity_images(id, 1, derive_seed(seed, step, i), model_config.image_size);
            batch = i == 0 ? one : ImageBatch::concat(batch, one);
            rows.push_back(model.encoder.encode_var(prompts[uniform_int(rng, 0, static_cast<int>(prompts.size()))]));
        }
        const ag::Var prompt = ag::stack(rows);
        const std::vector<int> t = draw_timesteps(config.batch, schedule.T, rng);
        const Tensor eps = randn(batch.pixels.shape(), rng);
        opt.zero_grad();
        const ag::Var loss = cond_loss(model.unet, ag::constant(batch.pixels), prompt, t, eps, schedule);
        check_finite(loss.item(), "train-base", step);
        ag::backward(loss);
        opt.step();
        if (losses) losses->push_back(loss.item());
    }
    model.unet.params().zero_grad();
    model.encoder.params().zero_grad();
    return model;
}

ImageBatch sample_class_images(const DiffusionModel& model, const std::string& base_prompt, int count,
                               std::uint64_t seed, int sample_steps) {
    return sample_ddim(model.unet, model.schedule, model.encode(base_prompt), sample_steps, count,
                       derive_seed(seed, 0xC1A55), model.config.image_size);
}

ImageBatch generate_class_images(const DiffusionModel& model, const std::string& base_prompt, int count,
                                 std::uint64_t seed, const std::filesystem::path& cache_dir, int sample_steps,
                                 bool* regenerated) {
    const std::map<std::string, std::string> meta = {{"prompt", base_prompt},
                                                      {"count", std::to_string(count)},
                                                      {"seed", std::to_string(seed)},
                                                      {"sample_steps", std::to_string(sample_steps)},
                                                      {"model_digest", model_digest(model)}};
    const fs::path stem = cache_dir / "class";
    if (fs::exists(fs::path(stem).concat(".json")) && fs::exists(fs::path(stem).concat(".bin"))) {
        try {
            ArchiveManifest m;
            ArrayMap arrays = load_archive(stem, &m);
            if (m.meta == meta && arrays.count("pixels")) {
                if (regenerated) *regenerated = false;
                ImageBatch b;
                b.pixels = std::move(arrays["pixels"]);
                b.labels.assign(b.pixels.dim(0), -1);
                return b;
            }
        } catch (const IntegrityError&) {
            // Corrupt cache entries are regenerated.
        }
    }
    ImageBatch batch = sample_class_images(model, base_prompt, count, seed, sample_steps);
    write_image_batch(cache_dir, "class", batch, "", meta);
    if (regenerated) *regenerated = true;
    return batch;
}

ag::Var dreambooth_loss(const Denoiser& unet, const NoiseSchedule& schedule, const Tensor& instance,
                        const ag::Var& instance_prompt, const Tensor& class_images, const ag::Var& base_prompt,
                        double lambda, Rng& rng) {
    const std::vector<int> t = draw_timesteps(instance.dim(0), schedule.T, rng);
    const Tensor eps = randn(instance.shape(), rng);
    ag::Var loss = cond_loss(unet, ag::constant(instance), instance_prompt, t, eps, schedule);
    if (lambda > 0.0 && !class_images.empty()) {
        const std::vector<int> t2 = draw_timesteps(class_images.dim(0), schedule.T, rng);
        const Tensor eps2 = randn(class_images.shape(), rng);
        const ag::Var prior = cond_loss(unet, ag::constant(class_images), base_prompt, t2, eps2, schedule);
        loss = ag::add(loss, ag::scale(prior, lambda));
    }
    return loss;
}

DreamboothTrainer::DreamboothTrainer(NoisePredictor& unet, const NoiseSchedule& schedule,
                                     PromptEmbedding instance_prompt, PromptEmbedding base_prompt,
                                     ImageBatch class_images, double lambda, int batch, OptimizerKind optimizer,
                                     double lr, std::uint64_t seed)
    : unet_(unet), schedule_(schedule), instance_prompt_(ag::constant(std::move(instance_prompt.matrix))),
      base_prompt_(ag::constant(std::move(base_prompt.matrix))), class_images_(std::move(class_images)),
      lambda_(lambda), batch_(batch), optimizer_(make_optimizer(optimizer, unet.params().vars(), lr)), seed_(seed) {}

double DreamboothTrainer::step(const Tensor& instance_pixels) {
    Rng rng(derive_seed(seed_, 0xDB, steps_done_));
    const Tensor inst = pick_rows(instance_pixels, batch_, rng);
    const Tensor cls = class_images_.size() > 0 ? pick_rows(class_images_.pixels, batch_, rng) : Tensor();
    unet_.params().set_trainable(true);
    optimizer_->zero_grad();
    const ag::Var loss = dreambooth_loss(unet_, schedule_, inst, instance_prompt_, cls, base_prompt_, lambda_, rng);
    const double value = loss.item();
    check_finite(value, "dreambooth", steps_done_);
    ag::backward(loss);
    optimizer_->step();
    optimizer_->zero_grad();
    unet_.params().set_trainable(false);
    ++steps_done_;
    return value;
}

void DreamboothTrainer::train(const Tensor& instance_pixels, int steps) {
    for (int i = 0; i < steps; ++i) step(instance_pixels);
}

NoisePredictor dreambooth_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                   const ImageBatch& class_images, const DreamboothConfig& config, std::uint64_t seed,
                                   std::vector<double>* losses) {
    config.validate();
    NoisePredictor unet = base.unet.clone();
    DreamboothTrainer trainer(unet, base.schedule, base.encode(config.instance_prompt), base.encode(config.base_prompt),
                              class_images, config.lambda, config.batch, config.optimizer, config.lr, seed);
    for (int i = 0; i < config.steps; ++i) {
        const double l = trainer.step(instance_images.pixels);
        if (losses) losses->push_back(l);
    }
    return unet;
}

LoraAdapter::LoraAdapter(const NoisePredictor& unet, int rank, double scale, std::uint64_t seed)
    : rank_(rank), scale_(scale) {
    if (rank < 1) throw ArgumentError("LoRA rank must be >= 1");
    Rng rng(derive_seed(seed, 0x10FA));
    for (const auto& [name, shape] : unet.projection_shapes()) {
        const int out = shape[0], in = shape[1];
        params_.add(name + ".A", init_fan_in({rank, in}, in, rng));
        params_.add(name + ".B", Tensor({out, rank}));
    }
}

LoraAdapter::LoraAdapter(int rank, double scale, ParameterStore params)
    : rank_(rank), scale_(scale), params_(std::move(params)) {}

bool LoraAdapter::covers(const std::string& projection) const { return params_.contains(projection + ".A"); }

ag::Var LoraAdapter::delta(const std::string& projection, const ag::Var& x) const {
    const ag::Var h = ag::linear(x, params_.get(projection + ".A"), ag::Var());
    return ag::scale(ag::linear(h, params_.get(projection + ".B"), ag::Var()), scale_);
}

NoisePredictor with_adapter(const NoisePredictor& unet, std::shared_ptr<const LinearAdapter> adapter) {
    NoisePredictor out = unet.clone();
    out.attach_adapter(std::move(adapter));
    return out;
}

std::shared_ptr<LoraAdapter> lora_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                           const ImageBatch& class_images, const DreamboothConfig& config,
                                           std::uint64_t seed, std::vector<double>* losses) {
    config.validate();
    auto adapter = std::make_shared<LoraAdapter>(base.unet, config.lora_rank, config.lora_scale, seed);
    NoisePredictor unet = with_adapter(base.unet, adapter);
    unet.params().set_trainable(false);
    Adam opt(adapter->params().vars(), config.lora_lr);
    const ag::Var inst_prompt = ag::constant(base.encode(config.instance_prompt).matrix);
    const ag::Var base_prompt = ag::constant(base.encode(config.base_prompt).matrix);
    for (int step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(seed, 0x10A, step));
        const Tensor inst = pick_rows(instance_images.pixels, config.batch, rng);
        const Tensor cls = class_images.size() > 0 ? pick_rows(class_images.pixels, config.batch, rng) : Tensor();
        opt.zero_grad();
        const ag::Var loss = dreambooth_loss(unet, base.schedule, inst, inst_prompt, cls, base_prompt, config.lambda, rng);
        check_finite(loss.item(), "lora", step);
        ag::backward(loss);
        opt.step();
        if (losses) losses->push_back(loss.item());
    }
    adapter->params().zero_grad();
    return adapter;
}

TIEmbedding textual_inversion_finetune(const DiffusionModel& base, const ImageBatch& instance_images,
                                       const DreamboothConfig& config, std::uint64_t seed,
                                       std::vector<double>* losses) {
    config.validate();
    const int token = Vocabulary::id(config.keyword);
    const PromptTokens tokens = tokenize(config.instance_prompt, base.config.prompt_length);
    bool present = false;
    for (int id : tokens.ids) present |= (id == token);
    if (!present) throw ConfigError("instance prompt does not contain keyword '" + config.keyword + "'");

    const Tensor& table = base.encoder.params().get("tokens").value();
    const int d = table.dim(1);
    Tensor init({d});
    std::copy(table.data() + static_cast<std::size_t>(token) * d, table.data() + static_cast<std::size_t>(token + 1) * d,
              init.data());
    ag::Var row(init, true);

    // Frozen copies: no gradient reaches any model parameter.
    NoisePredictor unet = base.unet.clone();
    unet.params().set_trainable(false);
    PromptEncoder encoder = base.encoder.clone();
    encoder.params().set_trainable(false);

    Adam opt({row}, config.ti_lr);
    for (int step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(seed, 0x7E, step));
        const Tensor inst = pick_rows(instance_images.pixels, config.batch, rng);
        const ag::Var prompt = encoder.encode_with_row(tokens, token, row);
        opt.zero_grad();
        const std::vector<int> t = draw_timesteps(inst.dim(0), base.schedule.T, rng);
        const Tensor eps = randn(inst.shape(), rng);
        const ag::Var loss = cond_loss(unet, ag::constant(inst), prompt, t, eps, base.schedule);
        check_finite(loss.item(), "textual-inversion", step);
        ag::backward(loss);
        opt.step();
        if (losses) losses->push_back(loss.item());
    }
    return {token, row.value()};
}

PromptEmbedding encode_with_embedding(const DiffusionModel& model, const std::string& prompt, const TIEmbedding& ti) {
    ag::NoGradGuard guard;
    const PromptTokens tokens = tokenize(prompt, model.config.prompt_length);
    const ag::Var m = model.encoder.encode_with_row(tokens, ti.token_id, ag::constant(ti.row));
    return {m.value(), PromptSource::encoded};
}

}  // namespace cloak
