#include "cloak/attack.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "cloak/errors.hpp"
#include "cloak/io.hpp"
#include "cloak/log.hpp"

namespace cloak {

namespace {

constexpr int kMaxDegenerateRun = 10;

struct VariantName {
    AttackVariant variant;
    const char* name;
};

constexpr VariantName kVariants[] = {
    {AttackVariant::dadiff, "dadiff"},
    {AttackVariant::single_step, "single_step"},
    {AttackVariant::cond_only_single_step, "cond_only_single_step"},
    {AttackVariant::cond_only_lrtge, "cond_only_lrtge"},
    {AttackVariant::sa_only, "sa_only"},
    {AttackVariant::ca_only, "ca_only"},
};

double mean_abs(const Tensor& g) { return g.numel() ? g.abs_sum() / static_cast<double>(g.numel()) : 0.0; }

}  // namespace

const char* to_string(AttackVariant variant) {
    for (const auto& v : kVariants)
        if (v.variant == variant) return v.name;
    return "unknown";
}

AttackVariant variant_from_string(const std::string& name) {
    for (const auto& v : kVariants)
        if (name == v.name) return v.variant;
    throw ConfigError("unknown attack variant '" + name + "'");
}

std::vector<AttackVariant> all_variants() {
    std::vector<AttackVariant> out;
    for (const auto& v : kVariants) out.push_back(v.variant);
    return out;
}

void AttackConfig::validate() const {
    std::vector<std::string> problems;
    if (T < 2) problems.push_back("T must be >= 2");
    if (B < 1) problems.push_back("B must be >= 1");
    else if (T % B != 0) problems.push_back("B (" + std::to_string(B) + ") must divide T (" + std::to_string(T) + ")");
    if (!(alpha1 >= 0.0 && alpha1 <= 1.0)) problems.push_back("alpha1 must lie in [0, 1]");
    if (!(alpha2 >= 0.0)) problems.push_back("alpha2 must be >= 0");
    if (apv_rounds < 0) problems.push_back("apv_rounds must be >= 0");
    if (!(eta_apv >= 0.0)) problems.push_back("eta_apv must be >= 0");
    if (t_out < 1 || t_in < 1) problems.push_back("t_out and t_in must be >= 1");
    if (!(omega > 0.0)) problems.push_back("omega must be > 0");
    if (!(eta > 0.0)) problems.push_back("eta must be > 0");
    if (problems.empty()) return;
    std::string msg = "attack config invalid:";
    for (const auto& p : problems) msg += "\n  attack." + p;
    throw ConfigError(msg);
}

LossWeights resolve_variant(AttackVariant variant, const AttackConfig& config) {
    LossWeights w;
    w.segments = config.B;
    w.alpha1 = config.alpha1;
    w.alpha2 = config.alpha2;
    w.ca_similarity = config.ca_similarity;
    switch (variant) {
        case AttackVariant::dadiff:
            break;
        case AttackVariant::single_step:
            w.segments = 1;
            break;
        case AttackVariant::cond_only_single_step:
            w.segments = 1;
            w.attention = false;
            w.alpha2 = 0.0;
            break;
        case AttackVariant::cond_only_lrtge:
            w.attention = false;
            w.alpha2 = 0.0;
            break;
        case AttackVariant::sa_only:
            w.alpha1 = 0.0;
            break;
        case AttackVariant::ca_only:
            w.alpha1 = 1.0;
            break;
    }
    if (w.alpha2 == 0.0) w.attention = false;
    return w;
}

Tensor normalize_l1(const Tensor& g, bool* degenerate) {
    const double n = g.abs_sum();
    if (degenerate) *degenerate = !(n > 0.0);
    if (!(n > 0.0)) {
        log_warn("degenerate gradient: L1 norm is zero");
        return Tensor(g.shape());
    }
    return g * (1.0 / n);
}

APVState apv_init(const PromptEmbedding& init, double lr, std::uint64_t seed) {
    APVState s;
    s.embedding = {init.matrix, PromptSource::adversarial};
    s.lr = lr;
    s.seed = seed;
    return s;
}

void apv_step(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& x0, APVState& state,
              int* degenerate_run) {
    Rng rng(derive_seed(state.seed, 0xA9, static_cast<std::uint64_t>(state.iterations_done)));
    const int t = uniform_int(rng, 0, schedule.T);
    const Tensor eps = randn(x0.shape(), rng);
    ag::Var p(state.embedding.matrix, true);
    const ag::Var loss = cond_loss(model, ag::constant(x0), p, t, eps, schedule);
    if (!std::isfinite(loss.item())) throw StageError("apv", "non-finite L_cond at iteration " + std::to_string(state.iterations_done));
    ag::backward(loss);
    bool degenerate = false;
    const Tensor step = normalize_l1(p.grad(), &degenerate);
    state.losses.push_back(loss.item());
    state.embedding.matrix += step * state.lr;
    ++state.iterations_done;
    if (degenerate_run) *degenerate_run = degenerate ? *degenerate_run + 1 : 0;
}

void apv_continue(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& x0, APVState& state, int rounds) {
    int run = 0;
    for (int i = 0; i < rounds; ++i) {
        apv_step(model, schedule, x0, state, &run);
        if (run >= kMaxDegenerateRun)
            throw StageError("apv", std::to_string(run) + " consecutive degenerate gradients at iteration " +
                                        std::to_string(state.iterations_done));
    }
}

APVState apv_attack(const Denoiser& model, const NoiseSchedule& schedule, const ImageBatch& x0,
                    const PromptEmbedding& init_prompt, int rounds, double eta_apv, std::uint64_t seed) {
    APVState state = apv_init(init_prompt, eta_apv, seed);
    apv_continue(model, schedule, x0.pixels, state, rounds);
    return state;
}

namespace {

std::vector<std::pair<const AttentionRecord*, const AttentionRecord*>> paired(const AttentionTrace& adv,
                                                                              const AttentionTrace& clean,
                                                                              AttentionKind kind) {
    const auto a = adv.of_kind(kind);
    const auto c = clean.of_kind(kind);
    if (a.empty() || c.empty())
        throw InternalError(std::string("attention loss needs captured ") + to_string(kind) + "-attention records");
    if (a.size() != c.size()) throw InternalError("adversarial and clean traces differ in layer count");
    std::vector<std::pair<const AttentionRecord*, const AttentionRecord*>> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]->module_id != c[i]->module_id) throw InternalError("trace order mismatch at " + a[i]->module_id);
        out.emplace_back(a[i], c[i]);
    }
    return out;
}

}  // namespace

ag::Var self_attn_loss(const AttentionTrace& adv, const AttentionTrace& clean) {
    ag::Var total;
    for (const auto& [a, c] : paired(adv, clean, AttentionKind::self)) {
        const ag::Var term = ag::mse(a->output, ag::detach(c->output));
        total = total.defined() ? ag::add(total, term) : term;
    }
    return total;
}

ag::Var cross_attn_loss(const AttentionTrace& adv, const AttentionTrace& clean, bool similarity, int* degenerate) {
    ag::Var total;
    int bad = 0;
    for (const auto& [a, c] : paired(adv, clean, AttentionKind::cross)) {
        int deg = 0;
        ag::Var term = ag::cosine_similarity(a->output, ag::detach(c->output), &deg);
        if (deg > 0) log_warn("zero-norm cross-attention output in " + a->module_id);
        bad += deg;
        if (!similarity) term = ag::add_scalar(ag::scale(term, -1.0), 1.0);
        total = total.defined() ? ag::add(total, term) : term;
    }
    if (degenerate) *degenerate = bad;
    return total;
}

ag::Var attention_loss(const ag::Var& l_sa, const ag::Var& l_ca, double alpha1) {
    if (!(alpha1 >= 0.0 && alpha1 <= 1.0)) throw ArgumentError("alpha1 must lie in [0, 1]");
    if (alpha1 == 1.0) return ag::scale(l_ca, 1.0);
    if (alpha1 == 0.0) return ag::scale(l_sa, 1.0);
    return ag::add(ag::scale(l_ca, alpha1), ag::scale(l_sa, 1.0 - alpha1));
}

double attention_loss(double l_sa, double l_ca, double alpha1) {
    if (!(alpha1 >= 0.0 && alpha1 <= 1.0)) throw ArgumentError("alpha1 must lie in [0, 1]");
    return alpha1 * l_ca + (1.0 - alpha1) * l_sa;
}

namespace {

AttentionTrace clean_trace(const Denoiser& model, const Tensor& x_clean_t, int t, const Tensor& prompt) {
    ag::NoGradGuard guard;
    const int ts[1] = {t};
    return model.predict(ag::constant(x_clean_t), std::span<const int>(ts, 1), ag::constant(prompt), true).trace;
}

AttentionTrace adv_trace(const Denoiser& model, const ag::Var& x_adv_t, int t, const Tensor& prompt) {
    const int ts[1] = {t};
    return model.predict(x_adv_t, std::span<const int>(ts, 1), ag::constant(prompt), true).trace;
}

}  // namespace

ag::Var self_attn_loss(const Denoiser& model, const ag::Var& x_adv_t, const Tensor& x_clean_t, int t,
                       const PromptEmbedding& prompt) {
    return self_attn_loss(adv_trace(model, x_adv_t, t, prompt.matrix), clean_trace(model, x_clean_t, t, prompt.matrix));
}

ag::Var cross_attn_loss(const Denoiser& model, const ag::Var& x_adv_t, const Tensor& x_clean_t, int t,
                        const PromptEmbedding& instance_prompt, const APVState& apv, bool similarity) {
    return cross_attn_loss(adv_trace(model, x_adv_t, t, instance_prompt.matrix),
                           clean_trace(model, x_clean_t, t, apv.embedding.matrix), similarity);
}

std::vector<int> sample_segment_timesteps(int T, int B, Rng& rng) {
    if (B < 1 || T % B != 0) throw ArgumentError("segment count must divide T");
    const int width = T / B;
    std::vector<int> out(B);
    for (int b = 0; b < B; ++b) out[b] = b * width + uniform_int(rng, 0, width);
    return out;
}

GradientBundle lrtge_gradient(const AttackInputs& in, const Tensor& delta, const LossWeights& w, Rng& rng) {
    if (!in.model || !in.schedule) throw ArgumentError("lrtge_gradient: model and schedule are required");
    if (delta.shape() != in.x0.shape()) throw ArgumentError("lrtge_gradient: delta shape differs from x0");
    const bool use_sa = w.uses_self(), use_ca = w.uses_cross();
    if (use_ca && !in.apv) throw ArgumentError("lrtge_gradient: cross-attention loss needs an APV");
    const Denoiser& model = *in.model;
    const NoiseSchedule& schedule = *in.schedule;

    GradientBundle out;
    out.has_attention = w.attention;
    out.timesteps = sample_segment_timesteps(schedule.T, w.segments, rng);
    out.g_cond = Tensor(delta.shape());
    out.g_attn = Tensor(delta.shape());
    const ag::Var prompt = ag::constant(in.instance_prompt.matrix);

    for (int t : out.timesteps) {
        const int ts[1] = {t};
        const Tensor eps = randn(delta.shape(), rng);
        ag::Var x_adv(in.x0 + delta, true);
        const ag::Var x_adv_t = q_sample(x_adv, std::span<const int>(ts, 1), eps, schedule);
        const Prediction pred = model.predict(x_adv_t, std::span<const int>(ts, 1), prompt, w.attention);
        const ag::Var l_cond = ag::mse(pred.noise, ag::constant(eps));
        out.l_cond += l_cond.item();
        ag::backward(l_cond);
        const Tensor g_cond = x_adv.grad();
        out.cond_scores.push_back(mean_abs(g_cond));
        out.g_cond += g_cond;
        if (!w.attention) continue;

        const Tensor x_clean_t = q_sample(in.x0, t, eps, schedule);
        ag::Var l_sa, l_ca;
        if (use_sa) {
            l_sa = self_attn_loss(pred.trace, clean_trace(model, x_clean_t, t, in.instance_prompt.matrix));
            out.l_sa += l_sa.item();
        }
        if (use_ca) {
            l_ca = cross_attn_loss(pred.trace, clean_trace(model, x_clean_t, t, in.apv->matrix), w.ca_similarity);
            out.l_ca += l_ca.item();
        }
        const ag::Var l_a = !use_ca ? ag::scale(l_sa, 1.0) : !use_sa ? ag::scale(l_ca, 1.0) : attention_loss(l_sa, l_ca, w.alpha1);
        out.l_a += l_a.item();
        x_adv.zero_grad();
        ag::backward(l_a);
        const Tensor g_attn = x_adv.grad();
        out.attn_scores.push_back(mean_abs(g_attn));
        out.g_attn += g_attn;
    }
    const double n = static_cast<double>(out.timesteps.size());
    out.l_cond /= n;
    out.l_sa /= n;
    out.l_ca /= n;
    out.l_a /= n;

    out.g_cond_normalized = normalize_l1(out.g_cond, &out.cond_degenerate);
    out.g_total = out.g_cond_normalized;
    if (w.attention) {
        out.g_attn_normalized = normalize_l1(out.g_attn, &out.attn_degenerate);
        out.g_total += out.g_attn_normalized * w.alpha2;
    } else {
        out.g_attn_normalized = Tensor(delta.shape());
    }
    return out;
}

PerturbationState PerturbationState::start(Tensor x0, double omega, double eta) {
    PerturbationState s;
    s.delta = Tensor(x0.shape());
    s.x0 = std::move(x0);
    s.omega = omega;
    s.eta = eta;
    return s;
}

Tensor PerturbationState::adversarial() const { return x0 + delta; }

void pgd_step(PerturbationState& state, const Tensor& g_total) {
    if (g_total.shape() != state.delta.shape()) throw ArgumentError("pgd_step: gradient shape differs from delta");
    for (std::size_t i = 0; i < state.delta.numel(); ++i) {
        const double g = g_total[i];
        const double s = g > 0.0 ? 1.0 : g < 0.0 ? -1.0 : 0.0;
        const double d = std::clamp(state.delta[i] + state.eta * s, -state.omega, state.omega);
        const double x = std::clamp(state.x0[i] + d, -1.0, 1.0);
        state.delta[i] = x - state.x0[i];
    }
    ++state.round;
}

namespace {

const char* kLogHeader = "outer_round,inner_iter,segment_scores_json,L_cond,L_SA,L_CA,L_A,delta_linf";

double parse_number(const std::string& s, int line, const char* field) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError(std::string("bad ") + field + " value '" + s + "'", line);
    }
}

}  // namespace

std::string format_run_log(const RunLog& log) {
    std::ostringstream out;
    out << kLogHeader << "\n";
    for (const auto& r : log.rows) {
        nlohmann::json scores = {{"t", r.timesteps}, {"cond", r.cond_scores}, {"attn", r.attn_scores}};
        out << csv_row({std::to_string(r.outer_round), std::to_string(r.inner_iter), scores.dump(),
                        format_double(r.l_cond), format_double(r.l_sa), format_double(r.l_ca), format_double(r.l_a),
                        format_double(r.delta_linf)})
            << "\n";
    }
    return out.str();
}

RunLog parse_run_log(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int n = 0;
    if (!std::getline(in, line)) throw ParseError("empty run log", 1);
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kLogHeader) throw ParseError("unexpected header", n);
    RunLog log;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty() || line == "\r") continue;
        const auto f = csv_split(line, n);
        if (f.size() != 8) throw ParseError("expected 8 fields, found " + std::to_string(f.size()), n);
        RunLogRow r;
        r.outer_round = static_cast<int>(parse_number(f[0], n, "outer_round"));
        r.inner_iter = static_cast<int>(parse_number(f[1], n, "inner_iter"));
        try {
            const auto j = nlohmann::json::parse(f[2]);
            r.timesteps = j.at("t").get<std::vector<int>>();
            r.cond_scores = j.at("cond").get<std::vector<double>>();
            r.attn_scores = j.at("attn").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad segment_scores_json: ") + e.what(), n);
        }
        r.l_cond = parse_number(f[3], n, "L_cond");
        r.l_sa = parse_number(f[4], n, "L_SA");
        r.l_ca = parse_number(f[5], n, "L_CA");
        r.l_a = parse_number(f[6], n, "L_A");
        r.delta_linf = parse_number(f[7], n, "delta_linf");
        log.rows.push_back(std::move(r));
    }
    if (log.rows.empty()) throw ParseError("run log has no iterations", n);
    return log;
}

void write_run_log(const std::filesystem::path& path, const RunLog& log) { write_text(path, format_run_log(log)); }

RunLog read_run_log(const std::filesystem::path& path) { return parse_run_log(read_text(path)); }

AttackResult run_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                        const AttackPrompts& prompts, const DreamboothConfig& db, const AttackConfig& config,
                        AttackVariant variant, const IterationObserver& observer) {
    config.validate();
    db.validate();
    if (config.T != base.schedule.T) throw ConfigError("attack T differs from the model schedule");
    if (clean.size() < 1) throw ArgumentError("attack needs at least one image");
    const LossWeights w = resolve_variant(variant, config);
    const PromptEmbedding instance = base.encode(prompts.instance);

    AttackResult result;
    if (w.uses_cross()) {
        NoisePredictor frozen = base.unet.clone();
        frozen.params().set_trainable(false);
        try {
            result.apv = apv_attack(frozen, base.schedule, clean, instance, config.apv_rounds, config.eta_apv,
                                    derive_seed(config.seed, 0xA9));
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("apv", e.what());
        }
        result.used_apv = true;
    }

    NoisePredictor surrogate = base.unet.clone();
    surrogate.params().set_trainable(false);
    DreamboothTrainer trainer(surrogate, base.schedule, instance, base.encode(prompts.base), class_images, db.lambda,
                              db.batch, OptimizerKind::sgd, db.surrogate_lr, derive_seed(config.seed, 0x5D));
    auto surrogate_train = [&](const Tensor& x) {
        try {
            trainer.train(x, db.surrogate_steps);
        } catch (const std::exception& e) {
            throw StageError("surrogate", e.what());
        }
    };

    PerturbationState state = PerturbationState::start(clean.pixels, config.omega, config.eta);
    AttackInputs inputs{&surrogate, &base.schedule, clean.pixels, instance, result.used_apv ? &result.apv.embedding : nullptr};
    int iteration = 0;
    for (int r = 0; r < config.t_out; ++r) {
        surrogate_train(clean.pixels);
        for (int k = 0; k < config.t_in; ++k, ++iteration) {
            Rng rng(derive_seed(config.seed, 0x1E, static_cast<std::uint64_t>(iteration)));
            GradientBundle bundle;
            try {
                bundle = lrtge_gradient(inputs, state.delta, w, rng);
                pgd_step(state, bundle.g_total);
            } catch (const std::exception& e) {
                throw StageError("pgd", e.what());
            }
            RunLogRow row;
            row.outer_round = r;
            row.inner_iter = k;
            row.timesteps = bundle.timesteps;
            row.cond_scores = bundle.cond_scores;
            row.attn_scores = bundle.attn_scores;
            row.l_cond = bundle.l_cond;
            row.l_sa = bundle.l_sa;
            row.l_ca = bundle.l_ca;
            row.l_a = bundle.l_a;
            row.delta_linf = state.delta.max_abs();
            result.log.rows.push_back(std::move(row));
            if (observer) observer({r, k, state, bundle});
        }
        surrogate_train(state.adversarial());
    }
    result.delta = state.delta;
    result.protected_images = {state.adversarial(), clean.labels};
    return result;
}

AttackResult dadiff_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                           const AttackPrompts& prompts, const DreamboothConfig& db, const AttackConfig& config,
                           const IterationObserver& observer) {
    return run_attack(base, clean, class_images, prompts, db, config, AttackVariant::dadiff, observer);
}

AttackResult baseline_attack(const DiffusionModel& base, const ImageBatch& clean, const ImageBatch& class_images,
                             const AttackPrompts& prompts, AttackVariant variant, const DreamboothConfig& db,
                             const AttackConfig& config, const IterationObserver& observer) {
    if (variant == AttackVariant::dadiff) throw ArgumentError("baseline_attack: use dadiff_attack for the full method");
    return run_attack(base, clean, class_images, prompts, db, config, variant, observer);
}

}  // namespace cloak
