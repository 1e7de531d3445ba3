// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Trained artifacts (base model, embedder, class images, attack outputs) are
// cached under --cache keyed by the configuration hash, so a rerun with the
// same configuration only repeats the evaluation.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>

#include "cli.hpp"
#include "cloak/checkpoint.hpp"
#include "cloak/errors.hpp"
#include "cloak/io.hpp"
#include "cloak/log.hpp"
#include "cloak/pipeline.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace cloak {
namespace {

constexpr int kSeeds = 5;
constexpr int kApvSeeds = 10;

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Per-iteration bounds seen by the attack observer.
struct IterationStats {
    int iterations = 0;
    double max_linf = 0.0;
    double min_pixel = 0.0;
    double max_pixel = 0.0;
    double max_l1_dev = 0.0;
    int normalized = 0;

    void observe(const IterationEvent& e) {
        const Tensor adv = e.state.adversarial();
        const auto v = adv.values();
        const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
        if (iterations == 0) {
            min_pixel = lo;
            max_pixel = hi;
        }
        ++iterations;
        max_linf = std::max(max_linf, e.state.delta.max_abs());
        min_pixel = std::min(min_pixel, lo);
        max_pixel = std::max(max_pixel, hi);
        const auto check = [&](const Tensor& g, bool degenerate) {
            if (degenerate) return;
            max_l1_dev = std::max(max_l1_dev, std::abs(g.abs_sum() - 1.0));
            ++normalized;
        };
        check(e.bundle.g_cond_normalized, e.bundle.cond_degenerate);
        if (e.bundle.has_attention) check(e.bundle.g_attn_normalized, e.bundle.attn_degenerate);
    }
    void merge(const IterationStats& o) {
        if (o.iterations == 0) return;
        if (iterations == 0) {
            min_pixel = o.min_pixel;
            max_pixel = o.max_pixel;
        }
        iterations += o.iterations;
        max_linf = std::max(max_linf, o.max_linf);
        min_pixel = std::min(min_pixel, o.min_pixel);
        max_pixel = std::max(max_pixel, o.max_pixel);
        max_l1_dev = std::max(max_l1_dev, o.max_l1_dev);
        normalized += o.normalized;
    }
    json to_json() const {
        return {{"iterations", iterations}, {"max_linf", max_linf}, {"min_pixel", min_pixel},
                {"max_pixel", max_pixel},   {"max_l1_dev", max_l1_dev}, {"normalized", normalized}};
    }
    static IterationStats from_json(const json& j) {
        IterationStats s;
        s.iterations = j.at("iterations");
        s.max_linf = j.at("max_linf");
        s.min_pixel = j.at("min_pixel");
        s.max_pixel = j.at("max_pixel");
        s.max_l1_dev = j.at("max_l1_dev");
        s.normalized = j.at("normalized");
        return s;
    }
};

struct CachedAttack {
    ImageBatch protected_images;
    RunLog log;
    IterationStats stats;
};

class Lab {
public:
    Lab(ExperimentConfig config, fs::path cache) : config_(std::move(config)) {
        config_.validate();
        dir_ = cache / config_.hash().substr(0, 12);
        fs::create_directories(dir_);
        write_text(dir_ / "config.json", config_to_json(config_));
    }

    const ExperimentConfig& config() const { return config_; }

    const DiffusionModel& base() {
        if (!base_) {
            const fs::path stem = dir_ / "base";
            if (fs::exists(stem.string() + ".json")) {
                base_ = load_model(stem);
            } else {
                log_info("training base model");
                base_ = build_base_model(config_);
                save_model(stem, *base_, config_.hash());
            }
        }
        return *base_;
    }

    const Embedder& embedder() {
        if (!embedder_) {
            const fs::path stem = dir_ / "embedder";
            if (fs::exists(stem.string() + ".json")) {
                embedder_ = load_embedder(stem);
            } else {
                log_info("training identity embedder");
                embedder_ = build_embedder(config_);
                save_embedder(stem, *embedder_, config_.eval.embedder, config_.hash());
            }
        }
        return *embedder_;
    }

    const ImageBatch& class_images() {
        if (!class_images_) {
            const DreamboothConfig& db = config_.dreambooth;
            class_images_ = generate_class_images(base(), db.base_prompt, db.class_image_count,
                                                  stage_seed(config_.seed, Stage::class_images), dir_ / "class_cache",
                                                  db.class_sample_steps);
        }
        return *class_images_;
    }

    IdentityData identity(int seed) const { return identity_data(config_.corpus, seed % config_.corpus.identities); }

    AttackConfig attack_config(int seed) const {
        AttackConfig a = config_.attack;
        a.seed = static_cast<std::uint64_t>(seed);
        return a;
    }

    const CachedAttack& attack(AttackVariant variant, int seed) {
        const std::string key = std::string(to_string(variant)) + "_s" + std::to_string(seed);
        if (auto it = attacks_.find(key); it != attacks_.end()) return it->second;
        const fs::path d = dir_ / ("attack_" + key);
        CachedAttack c;
        if (fs::exists(d / "stats.json")) {
            c.protected_images = read_image_batch(d, "protected");
            c.log = read_run_log(d / "log.csv");
            c.stats = IterationStats::from_json(json::parse(read_text(d / "stats.json")));
        } else {
            log_info("attack " + key);
            const IdentityData id = identity(seed);
            const AttackResult r =
                run_attack(base(), id.target, class_images(), attack_prompts(config_), config_.dreambooth,
                           attack_config(seed), variant, [&](const IterationEvent& e) { c.stats.observe(e); });
            c.protected_images = r.protected_images;
            c.log = r.log;
            fs::create_directories(d);
            write_image_batch(d, "protected", c.protected_images, config_.hash());
            write_run_log(d / "log.csv", c.log);
            write_text(d / "stats.json", c.stats.to_json().dump(2));
        }
        attack_stats_.merge(c.stats);
        return attacks_.emplace(key, std::move(c)).first->second;
    }

    // Customizes on clean ("clean") or protected (variant name) images and
    // scores the result. Clean and protected runs share every seed.
    const MetricsReport& scores(Mechanism mech, const std::string& data, int seed) {
        const std::string key = std::string(to_string(mech)) + "_" + data + "_s" + std::to_string(seed);
        if (auto it = scores_.find(key); it != scores_.end()) return it->second;
        const fs::path file = dir_ / ("scores_" + key + ".json");
        MetricsReport rep;
        if (fs::exists(file)) {
            const json j = json::parse(read_text(file));
            rep.ism_proxy = j.at("ism");
            rep.fdfr_proxy = j.at("fdfr");
            rep.feature_fid = j.at("fid");
            for (const auto& [p, m] : j.at("per_prompt").items()) {
                rep.per_prompt[p].ism = m.at("ism");
                rep.per_prompt[p].fdfr = m.at("fdfr");
            }
        } else {
            const IdentityData id = identity(seed);
            const ImageBatch instance =
                data == "clean" ? id.target : attack(variant_from_string(data), seed).protected_images;
            log_info("customize " + key);
            const std::uint64_t s = static_cast<std::uint64_t>(seed);
            const CustomizedModel m = customize(base(), instance, mech == Mechanism::ti ? ImageBatch{} : class_images(),
                                                mech, config_.dreambooth, stage_seed(s, Stage::customize));
            rep = evaluate_customized(base(), m, config_, id.reference, embedder(), stage_seed(s, Stage::sample));
            json pp = json::object();
            for (const auto& [p, m2] : rep.per_prompt) pp[p] = {{"ism", m2.ism}, {"fdfr", m2.fdfr}};
            write_text(file, json{{"ism", rep.ism_proxy}, {"fdfr", rep.fdfr_proxy}, {"fid", rep.feature_fid},
                                  {"per_prompt", pp}}
                                 .dump(2));
        }
        return scores_.emplace(key, std::move(rep)).first->second;
    }

    const IterationStats& attack_stats() const { return attack_stats_; }
    const fs::path& dir() const { return dir_; }

private:
    ExperimentConfig config_;
    fs::path dir_;
    std::optional<DiffusionModel> base_;
    std::optional<Embedder> embedder_;
    std::optional<ImageBatch> class_images_;
    std::map<std::string, CachedAttack> attacks_;
    std::map<std::string, MetricsReport> scores_;
    IterationStats attack_stats_;
};

// Variants not covered by the long runs get a short run each so every
// variant's iterations are bounds-checked.
IterationStats short_variant_runs(Lab& lab) {
    IterationStats all;
    AttackConfig a = lab.attack_config(0);
    a.t_out = 2;
    a.apv_rounds = 20;
    const IdentityData id = lab.identity(0);
    for (AttackVariant v : all_variants()) {
        IterationStats s;
        run_attack(lab.base(), id.target, lab.class_images(), attack_prompts(lab.config()), lab.config().dreambooth,
                   a, v, [&](const IterationEvent& e) { s.observe(e); });
        all.merge(s);
    }
    return all;
}

Verdict criterion_constraints(Lab& lab) {
    IterationStats s = short_variant_runs(lab);
    s.merge(lab.attack_stats());
    const double omega = lab.config().attack.omega;
    const bool pass = s.iterations > 0 && s.max_linf <= omega + 1e-6 && s.min_pixel >= -1.0 && s.max_pixel <= 1.0;
    return {pass, std::to_string(s.iterations) + " iterations over " + std::to_string(all_variants().size()) +
                      " variants, max |delta|_inf " + fmt(s.max_linf, 6) + ", pixels in [" + fmt(s.min_pixel) + ", " +
                      fmt(s.max_pixel) + "]"};
}

Verdict criterion_normalization(Lab& lab) {
    IterationStats s = short_variant_runs(lab);
    s.merge(lab.attack_stats());
    const bool pass = s.normalized > 0 && s.max_l1_dev <= 1e-5;
    return {pass, std::to_string(s.normalized) + " normalized gradients, max |L1 - 1| " + fmt(s.max_l1_dev, 10)};
}

// Pearson statistic against a uniform expectation.
double chi_square(const std::vector<int>& counts) {
    double total = 0.0;
    for (int c : counts) total += c;
    const double expected = total / static_cast<double>(counts.size());
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    return chi2;
}

Verdict criterion_segments() {
    constexpr int T = 1000, B = 25, kDraws = 10000, width = T / B;
    // 99th percentiles of chi-square with 24 and 39 degrees of freedom.
    constexpr double kCriticalSegments = 42.97982013935165;
    constexpr double kCriticalOffsets = 62.4281210161849;
    Rng rng(20240611);
    std::vector<int> segments(B, 0), offsets(width, 0);
    bool in_segment = true;
    for (int i = 0; i < kDraws / B; ++i) {
        const std::vector<int> ts = sample_segment_timesteps(T, B, rng);
        for (int b = 0; b < B; ++b) {
            const int seg = std::clamp(ts[b] / width, 0, B - 1);
            in_segment &= ts[b] / width == b;
            ++segments[seg];
            ++offsets[ts[b] - seg * width];
        }
    }
    const double expected = static_cast<double>(kDraws) / B;
    double worst = 0.0;
    for (int c : segments) worst = std::max(worst, std::abs(c - expected) / expected);
    const double chi2_seg = chi_square(segments), chi2_off = chi_square(offsets);
    const bool pass = in_segment && worst <= 0.2 && chi2_seg < kCriticalSegments && chi2_off < kCriticalOffsets;
    return {pass, std::string("segment membership ") + (in_segment ? "exact" : "violated") +
                      ", max segment frequency deviation " + fmt(100 * worst, 1) + "%, segment chi2 " +
                      fmt(chi2_seg, 2) + " (critical " + fmt(kCriticalSegments, 2) + "), within-segment chi2 " +
                      fmt(chi2_off, 2) + " (critical " + fmt(kCriticalOffsets, 2) + ")"};
}

Verdict criterion_gradients() {
    ModelConfig mc;
    mc.image_size = 8;
    mc.base_channels = 4;
    mc.mid_channels = 8;
    mc.embed_dim = 8;
    mc.time_dim = 8;
    mc.groups = 2;
    const DiffusionModel model = DiffusionModel::create(mc, build_linear_schedule());
    const NoiseSchedule& sched = model.schedule;
    const Tensor x0 = testing::random_tensor({1, 3, 8, 8}, 41, 0.5);
    const Tensor eps = testing::random_tensor({1, 3, 8, 8}, 42);
    const Tensor delta = testing::random_tensor({1, 3, 8, 8}, 43, 0.02);
    const PromptEmbedding prompt = model.encode("a photo of sks person");
    APVState apv = apv_init(prompt, 0.005, 1);
    apv.embedding.matrix += testing::random_tensor(prompt.matrix.shape(), 44, 0.3);
    const int t = 400;
    const Tensor x_clean_t = q_sample(x0, t, eps, sched);
    auto noised = [&](const ag::Var& d) {
        const int ts[] = {t};
        return q_sample(ag::add(ag::constant(x0), d), ts, eps, sched);
    };
    std::vector<std::pair<std::string, double>> errs;
    errs.emplace_back("L_cond/delta", testing::gradient_check(
                                          [&](const std::vector<ag::Var>& v) {
                                              return cond_loss(model.unet, ag::add(ag::constant(x0), v[0]),
                                                               ag::constant(prompt.matrix), t, eps, sched);
                                          },
                                          {delta}));
    errs.emplace_back("L_SA/delta", testing::gradient_check(
                                        [&](const std::vector<ag::Var>& v) {
                                            return self_attn_loss(model.unet, noised(v[0]), x_clean_t, t, prompt);
                                        },
                                        {delta}));
    errs.emplace_back("L_CA/delta", testing::gradient_check(
                                        [&](const std::vector<ag::Var>& v) {
                                            return cross_attn_loss(model.unet, noised(v[0]), x_clean_t, t, prompt, apv);
                                        },
                                        {delta}));
    errs.emplace_back("L_cond/P_adv", testing::gradient_check(
                                          [&](const std::vector<ag::Var>& v) {
                                              return cond_loss(model.unet, ag::constant(x0), v[0], t, eps, sched);
                                          },
                                          {apv.embedding.matrix}));
    bool pass = true;
    std::string detail = "max relative error";
    for (const auto& [name, e] : errs) {
        pass &= e < 1e-3;
        detail += " " + name + " " + fmt(e, 8);
    }
    return {pass, detail};
}

// Mean L_cond over a fixed set of (t, eps) pairs.
double fixed_pair_loss(const Denoiser& model, const NoiseSchedule& sched, const Tensor& x0, const Tensor& prompt,
                       const std::vector<std::pair<int, Tensor>>& pairs) {
    ag::NoGradGuard guard;
    double s = 0.0;
    for (const auto& [t, eps] : pairs)
        s += cond_loss(model, ag::constant(x0), ag::constant(prompt), t, eps, sched).item();
    return s / static_cast<double>(pairs.size());
}

Verdict criterion_apv(Lab& lab) {
    const DiffusionModel& base = lab.base();
    const ExperimentConfig& c = lab.config();
    const PromptEmbedding p_new = base.encode(c.dreambooth.instance_prompt);
    int beats_new = 0, early = 0;
    std::string detail;
    for (int s = 0; s < kApvSeeds; ++s) {
        const IdentityData id = lab.identity(s);
        Rng rng(derive_seed(0xF1CED, static_cast<std::uint64_t>(s)));
        std::vector<std::pair<int, Tensor>> pairs;
        for (int i = 0; i < 64; ++i) {
            const int t = uniform_int(rng, 0, c.schedule.T);
            pairs.emplace_back(t, randn(id.target.pixels.shape(), rng));
        }
        APVState apv = apv_init(p_new, c.attack.eta_apv, derive_seed(static_cast<std::uint64_t>(s), 0xA9));
        const double l0 = fixed_pair_loss(base.unet, base.schedule, id.target.pixels, apv.embedding.matrix, pairs);
        apv_continue(base.unet, base.schedule, id.target.pixels, apv, 10);
        const double l10 = fixed_pair_loss(base.unet, base.schedule, id.target.pixels, apv.embedding.matrix, pairs);
        apv_continue(base.unet, base.schedule, id.target.pixels, apv, c.attack.apv_rounds - 10);
        const double lr = fixed_pair_loss(base.unet, base.schedule, id.target.pixels, apv.embedding.matrix, pairs);
        beats_new += lr > l0;
        early += l10 > l0;
        detail += " [" + fmt(l0) + "->" + fmt(l10) + "->" + fmt(lr) + "]";
    }
    const bool pass = beats_new >= 9 && early >= 8;
    return {pass, "P_adv above P_new in " + std::to_string(beats_new) + "/10, iteration 10 above 0 in " +
                      std::to_string(early) + "/10; L_cond r=0->10->" + std::to_string(c.attack.apv_rounds) + ":" +
                      detail};
}

Verdict criterion_dynamics(Lab& lab) {
    int wins = 0;
    std::string detail;
    for (int s = 0; s < kSeeds; ++s) {
        const double a2 = lab.config().attack.alpha2;
        const DynamicsSummary lrtge = dynamics_report(lab.attack(AttackVariant::cond_only_lrtge, s).log, a2);
        const DynamicsSummary single = dynamics_report(lab.attack(AttackVariant::cond_only_single_step, s).log, a2);
        const bool ok = lrtge.increment_variance < single.increment_variance && lrtge.final_loss > single.final_loss;
        wins += ok;
        detail += " [var " + fmt(lrtge.increment_variance, 6) + " vs " + fmt(single.increment_variance, 6) +
                  ", final " + fmt(lrtge.final_loss) + " vs " + fmt(single.final_loss) + "]";
    }
    return {wins >= 4, "LRTGE steadier and higher in " + std::to_string(wins) + "/5 seed pairs:" + detail};
}

Verdict criterion_end_to_end(Lab& lab) {
    int wins = 0;
    std::string detail;
    for (int s = 0; s < kSeeds; ++s) {
        const MetricsReport& clean = lab.scores(Mechanism::dreambooth, "clean", s);
        const MetricsReport& prot = lab.scores(Mechanism::dreambooth, "dadiff", s);
        bool ok = true;
        detail += " s" + std::to_string(s) + ":";
        for (const std::string& p : lab.config().eval.prompts) {
            const PromptMetrics& a = clean.per_prompt.at(p);
            const PromptMetrics& b = prot.per_prompt.at(p);
            ok &= b.ism < a.ism && b.fdfr > a.fdfr;
            detail += " [" + p + " ism " + fmt(a.ism, 3) + "->" + fmt(b.ism, 3) + " fdfr " + fmt(a.fdfr, 3) + "->" +
                      fmt(b.fdfr, 3) + "]";
        }
        wins += ok;
    }
    return {wins >= 4, "protected worse on both prompts in " + std::to_string(wins) + "/5 seeds;" + detail};
}

Verdict criterion_ablation(Lab& lab) {
    int wins = 0;
    std::string detail;
    for (int s = 0; s < kSeeds; ++s) {
        const double full = lab.scores(Mechanism::dreambooth, "dadiff", s).ism_proxy;
        const double lrtge = lab.scores(Mechanism::dreambooth, "cond_only_lrtge", s).ism_proxy;
        const double single = lab.scores(Mechanism::dreambooth, "cond_only_single_step", s).ism_proxy;
        wins += full <= lrtge && lrtge <= single;
        detail += " [" + fmt(full, 3) + " <= " + fmt(lrtge, 3) + " <= " + fmt(single, 3) + "]";
    }
    return {wins >= 3, "ordering dadiff <= cond_only_lrtge <= cond_only_single_step in " + std::to_string(wins) +
                           "/5 seeds:" + detail};
}

Verdict criterion_cross_mechanism(Lab& lab) {
    bool pass = true;
    std::string detail;
    for (Mechanism m : {Mechanism::lora, Mechanism::ti}) {
        int wins = 0;
        std::string runs;
        for (int s = 0; s < kSeeds; ++s) {
            const double clean = lab.scores(m, "clean", s).ism_proxy;
            const double prot = lab.scores(m, "dadiff", s).ism_proxy;
            wins += prot < clean;
            runs += " " + fmt(clean, 3) + "->" + fmt(prot, 3);
        }
        pass &= wins >= 4;
        detail += std::string(detail.empty() ? "" : "; ") + to_string(m) + " lower in " + std::to_string(wins) +
                  "/5:" + runs;
    }
    return {pass, detail};
}

std::string file_bytes(const fs::path& p) { return read_text(p); }

Verdict criterion_determinism(Lab& lab, const fs::path& scratch) {
    // Two identical command-line invocations on a small configuration.
    const json tiny = {{"seed", 3},
                       {"corpus", {{"image_size", 8}, {"identities", 4}, {"per_id", 4}, {"embedder_per_id", 6}}},
                       {"model",
                        {{"base_channels", 4}, {"mid_channels", 8}, {"embed_dim", 8}, {"time_dim", 8}, {"groups", 2}}},
                       {"base", {{"steps", 30}}},
                       {"dreambooth", {{"class_image_count", 2}, {"class_sample_steps", 10}}},
                       {"attack", {{"t_out", 2}, {"t_in", 3}, {"apv_rounds", 5}}},
                       {"eval", {{"heatmap_resolution", 8}}}};
    fs::remove_all(scratch);
    fs::create_directories(scratch);
    write_text(scratch / "tiny.json", tiny.dump(2));
    std::vector<fs::path> runs;
    for (const char* name : {"a", "b"}) {
        const fs::path run = scratch / name;
        for (std::vector<std::string> args : {std::vector<std::string>{"train-base"},
                                              std::vector<std::string>{"attack", "--variant", "dadiff"}}) {
            args.insert(args.end(), {"--config", (scratch / "tiny.json").string(), "--run", run.string(),
                                     "--log-level", "warn"});
            std::ostringstream out, err;
            if (cli::run_command(args, out, err) != cli::kExitOk)
                return {false, "cloak " + args[0] + " failed: " + err.str()};
        }
        runs.push_back(run);
    }
    std::vector<fs::path> files = {fs::path("logs") / "attack_dadiff.csv"};
    for (const auto& e : fs::directory_iterator(runs[0] / "images"))
        if (e.path().filename().string().rfind("protected_dadiff", 0) == 0) files.push_back(fs::relative(e.path(), runs[0]));
    int identical_files = 0;
    for (const fs::path& f : files) identical_files += file_bytes(runs[0] / f) == file_bytes(runs[1] / f);
    const bool runs_match = identical_files == static_cast<int>(files.size()) && files.size() > 1;

    // Round trip of the trained desk-scale model.
    const fs::path stem = scratch / "roundtrip";
    save_model(stem, lab.base(), lab.config().hash());
    const ArrayMap before = model_arrays(lab.base()), after = model_arrays(load_model(stem));
    bool bitwise = before.size() == after.size();
    for (const auto& [name, t] : before) bitwise &= after.count(name) && identical(t, after.at(name));
    return {runs_match && bitwise, std::to_string(identical_files) + "/" + std::to_string(files.size()) +
                                       " run files byte-identical; checkpoint round trip " +
                                       (bitwise ? "bitwise" : "differs") + " over " +
                                       std::to_string(before.size()) + " arrays"};
}

Verdict criterion_metrics(Lab& lab) {
    const Embedder& emb = lab.embedder();
    const ImageBatch corpus = evaluation_corpus(lab.config().corpus);
    const double self_fid = feature_fid(corpus, corpus, emb);
    const int n = lab.config().corpus.identities;
    std::vector<ImageBatch> per_id;
    const CorpusConfig& cc = lab.config().corpus;
    for (int i = 0; i < n; ++i)
        per_id.push_back(generate_identity_images(Identity::make(i, cc.seed), cc.per_id, cc.render_seed, cc.image_size));
    int ordered = 0, pairs = 0;
    double worst_margin = 1e9;
    for (int i = 0; i < n; ++i) {
        const double self = ism_proxy(per_id[i], per_id[i], emb);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double cross = ism_proxy(per_id[j], per_id[i], emb);
            ++pairs;
            ordered += self > cross;
            worst_margin = std::min(worst_margin, self - cross);
        }
    }
    const bool pass = std::abs(self_fid) <= 1e-4 && ordered == pairs && emb.loo_accuracy > 0.9;
    return {pass, "feature_fid(A,A) " + fmt(self_fid, 8) + ", self > cross in " + std::to_string(ordered) + "/" +
                      std::to_string(pairs) + " pairs (min margin " + fmt(worst_margin) + "), leave-one-out accuracy " +
                      fmt(emb.loo_accuracy, 3)};
}

}  // namespace
}  // namespace cloak

int main(int argc, char** argv) {
    using namespace cloak;
    CLI::App app{"cloak acceptance run"};
    std::string config_path = CLOAK_ACCEPTANCE_CONFIG;
    std::string cache = "acceptance_cache";
    std::vector<int> only;
    std::string level = "info";
    app.add_option("--config", config_path, "experiment configuration");
    app.add_option("--cache", cache, "directory for trained artifacts");
    app.add_option("--only", only, "criteria to run (default all)");
    app.add_option("--log-level", level, "debug, info, warn, error or off");
    CLI11_PARSE(app, argc, argv);
    set_log_level(log_level_from_string(level));

    Lab lab(load_config(config_path), cache);
    std::cout << "acceptance config " << lab.config().hash().substr(0, 12) << " cache " << lab.dir().string()
              << std::endl;
    const fs::path scratch = fs::path(cache) / "determinism";
    // Long runs first so the bound checks in criteria 1 and 2 see their iterations.
    const std::vector<std::pair<int, std::pair<std::string, std::function<Verdict()>>>> criteria = {
        {3, {"LRTGE segmentation", [] { return criterion_segments(); }}},
        {4, {"gradient correctness", [] { return criterion_gradients(); }}},
        {11, {"metric sanity", [&] { return criterion_metrics(lab); }}},
        {10, {"determinism", [&] { return criterion_determinism(lab, scratch); }}},
        {5, {"APV efficacy", [&] { return criterion_apv(lab); }}},
        {7, {"end-to-end direction", [&] { return criterion_end_to_end(lab); }}},
        {8, {"ablation ordering", [&] { return criterion_ablation(lab); }}},
        {6, {"optimization dynamics", [&] { return criterion_dynamics(lab); }}},
        {9, {"cross-mechanism direction", [&] { return criterion_cross_mechanism(lab); }}},
        {1, {"constraint exactness", [&] { return criterion_constraints(lab); }}},
        {2, {"gradient normalization", [&] { return criterion_normalization(lab); }}},
    };
    std::map<int, std::string> lines;
    int failed = 0;
    for (const auto& [id, entry] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = entry.second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !v.pass;
        std::ostringstream line;
        line << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << " " << entry.first << " (" << fmt(secs, 1)
             << "s): " << v.detail;
        std::cout << line.str() << std::endl;
        lines[id] = line.str();
    }
    std::cout << "\nsummary\n";
    for (const auto& [id, line] : lines) std::cout << line.substr(0, line.find(':')) << "\n";
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failed ? 1 : 0;
}
