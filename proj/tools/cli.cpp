#include "cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "cloak/checkpoint.hpp"
#include "cloak/errors.hpp"
#include "cloak/io.hpp"
#include "cloak/log.hpp"
#include "cloak/pipeline.hpp"

namespace cloak::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config_path;
    std::string run_dir;
    std::string log_level = "info";

    // corpus generate
    int identities = 16;
    int per_id = 8;
    std::uint64_t corpus_seed = 7;
    std::uint64_t render_seed = 0;
    int image_size = kDefaultImageSize;
    std::string out_dir;

    std::string variant = "dadiff";
    std::string mechanism = "dreambooth";
    std::string data = "clean";
    std::string model = "base";
    int image_index = 0;
    int heatmap_t = -1;
    int resolution = -1;
};

// Tracks the pipeline stage for error tags.
struct StageTag {
    std::string name = "cli";
};

ExperimentConfig load(const Options& o) {
    return o.config_path.empty() ? parse_config("{}") : load_config(o.config_path);
}

RunLayout open_run(const ExperimentConfig& config, const Options& o) {
    fs::path root;
    if (!o.run_dir.empty()) root = o.run_dir;
    else if (!config.output_dir.empty()) root = config.output_dir;
    else root = default_output_root() / config.hash().substr(0, 12);
    RunLayout run{root};
    if (fs::exists(run.config())) {
        const ExperimentConfig existing = load_config(run.config());
        if (existing.hash() != config.hash())
            throw ConfigError("run directory " + root.string() + " holds a different configuration (hash " +
                              existing.hash().substr(0, 12) + ")");
    } else {
        write_text(run.config(), config_to_json(config));
    }
    for (const auto& d : {run.checkpoints(), run.images(), run.logs(), run.figures()}) fs::create_directories(d);
    return run;
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
    std::string text = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) text += std::to_string(i) + "," + format_double(losses[i]) + "\n";
    write_text(path, text);
}

void write_sidecar(const fs::path& path, const std::string& hash, json extra = json::object()) {
    extra["config_hash"] = hash;
    write_text(path, extra.dump(2) + "\n");
}

DiffusionModel need_base(const RunLayout& run) {
    const fs::path stem = run.checkpoints() / "base";
    if (!fs::exists(stem.string() + ".json")) throw std::runtime_error("no base model in " + run.root.string() + "; run train-base first");
    return load_model(stem);
}

ImageBatch class_images(const DiffusionModel& base, const ExperimentConfig& c, const RunLayout& run) {
    bool regenerated = false;
    ImageBatch out = generate_class_images(base, c.dreambooth.base_prompt, c.dreambooth.class_image_count,
                                           stage_seed(c.seed, Stage::class_images), run.checkpoints() / "class_cache",
                                           c.dreambooth.class_sample_steps, &regenerated);
    log_info(regenerated ? "sampled class images" : "reused cached class images");
    return out;
}

// Instance images named by --data: "clean" or an attack variant.
ImageBatch instance_images(const ExperimentConfig& c, const RunLayout& run, const std::string& data) {
    if (data == "clean") return identity_data(c.corpus, c.eval.identity).target;
    variant_from_string(data);
    const std::string prefix = "protected_" + data;
    if (!fs::exists(run.images() / (prefix + ".json")))
        throw std::runtime_error("no protected images for variant " + data + "; run attack --variant " + data);
    return read_image_batch(run.images(), prefix);
}

Embedder embedder_for(const ExperimentConfig& c, const RunLayout& run) {
    const fs::path stem = run.checkpoints() / "embedder";
    if (fs::exists(stem.string() + ".json")) return load_embedder(stem);
    Embedder e = build_embedder(c);
    save_embedder(stem, e, c.eval.embedder, c.hash());
    log_info("embedder leave-one-out accuracy " + format_double(e.loo_accuracy));
    return e;
}

CustomizedModel load_customized(const DiffusionModel& base, const RunLayout& run, Mechanism mech,
                                const std::string& data) {
    const fs::path stem = run.checkpoints() / (std::string(to_string(mech)) + "_" + data);
    if (!fs::exists(stem.string() + ".json"))
        throw std::runtime_error("no " + std::string(to_string(mech)) + " checkpoint for data '" + data + "'; run " +
                                 to_string(mech) + " --data " + data);
    CustomizedModel m;
    m.mechanism = mech;
    switch (mech) {
        case Mechanism::dreambooth:
            m.unet = base.unet.clone();
            load_unet_into(stem, m.unet);
            break;
        case Mechanism::lora:
            m.lora = load_lora(stem);
            m.unet = with_adapter(base.unet, m.lora);
            break;
        case Mechanism::ti:
            m.ti = load_ti(stem);
            m.unet = base.unet.clone();
            break;
    }
    return m;
}

int cmd_corpus(const Options& o, std::ostream& out) {
    CorpusConfig cc;
    cc.identities = o.identities;
    cc.per_id = o.per_id;
    cc.seed = o.corpus_seed;
    cc.render_seed = o.render_seed;
    cc.image_size = o.image_size;
    if (cc.identities < 1) throw ConfigError("--identities must be >= 1");
    if (cc.per_id < 1) throw ConfigError("--per-id must be >= 1");
    validate_image_size(cc.image_size);
    const json params = {{"identities", cc.identities}, {"per_id", cc.per_id}, {"seed", cc.seed},
                         {"render_seed", cc.render_seed}, {"image_size", cc.image_size}};
    const std::string hash = sha256_hex(params.dump());
    const fs::path dir = o.out_dir;
    fs::create_directories(dir);
    std::string manifest = csv_row({"identity", "render_seed", "file", "config_hash"}) + "\n";
    for (int id = 0; id < cc.identities; ++id) {
        const ImageBatch b =
            generate_identity_images(Identity::make(id, cc.seed), cc.per_id, cc.render_seed, cc.image_size);
        for (int i = 0; i < b.size(); ++i) {
            char name[48];
            std::snprintf(name, sizeof name, "id%03d_%03d.png", id, i);
            write_png(dir / name, b.image(i), {{"config_hash", hash}});
            manifest += csv_row({std::to_string(id), std::to_string(cc.render_seed), name, hash}) + "\n";
        }
    }
    write_text(dir / "manifest.csv", manifest);
    out << "wrote " << cc.identities * cc.per_id << " images to " << dir.string() << "\n";
    return kExitOk;
}

int cmd_train_base(const ExperimentConfig& c, const RunLayout& run, std::ostream& out) {
    std::vector<double> losses;
    const DiffusionModel m = build_base_model(c, &losses);
    const ArchiveManifest man = save_model(run.checkpoints() / "base", m, c.hash());
    write_losses(run.logs() / "train_base.csv", losses);
    write_sidecar(run.logs() / "train_base.json", c.hash(), {{"final_loss", losses.empty() ? 0.0 : losses.back()}});
    out << "base model " << man.digest.substr(0, 12) << " saved to " << (run.checkpoints() / "base").string() << "\n";
    return kExitOk;
}

int cmd_customize(const ExperimentConfig& c, const RunLayout& run, Mechanism mech, const std::string& data,
                  StageTag& tag, std::ostream& out) {
    tag.name = to_string(mech);
    const DiffusionModel base = need_base(run);
    const ImageBatch inst = instance_images(c, run, data);
    ImageBatch cls;
    if (mech != Mechanism::ti) {
        tag.name = "class-images";
        cls = class_images(base, c, run);
        tag.name = to_string(mech);
    }
    std::vector<double> losses;
    const CustomizedModel m = customize(base, inst, cls, mech, c.dreambooth, stage_seed(c.seed, Stage::customize), &losses);
    const std::string name = std::string(to_string(mech)) + "_" + data;
    const fs::path stem = run.checkpoints() / name;
    switch (mech) {
        case Mechanism::dreambooth: save_unet(stem, m.unet, c.hash()); break;
        case Mechanism::lora: save_lora(stem, *m.lora, c.hash()); break;
        case Mechanism::ti: save_ti(stem, *m.ti, c.hash()); break;
    }
    write_losses(run.logs() / (name + ".csv"), losses);
    write_sidecar(run.logs() / (name + ".json"), c.hash(), {{"mechanism", to_string(mech)}, {"data", data}});
    out << name << " saved to " << stem.string() << "\n";
    return kExitOk;
}

int cmd_attack(const ExperimentConfig& c, const RunLayout& run, const std::string& variant_name, StageTag& tag,
               std::ostream& out) {
    const AttackVariant variant = variant_from_string(variant_name);
    tag.name = "attack";
    const DiffusionModel base = need_base(run);
    const IdentityData id = identity_data(c.corpus, c.eval.identity);
    tag.name = "class-images";
    const ImageBatch cls = class_images(base, c, run);
    tag.name = "attack";
    const std::map<std::string, std::string> meta = {{"identity", std::to_string(c.eval.identity)},
                                                     {"seed", std::to_string(c.attack.seed)},
                                                     {"variant", variant_name}};
    write_image_batch(run.images(), "target", id.target, c.hash(), {{"identity", std::to_string(c.eval.identity)}});
    const int per_round = c.attack.t_in;
    const AttackResult r = run_attack(base, id.target, cls, attack_prompts(c), c.dreambooth, c.attack, variant,
                                      [&](const IterationEvent& e) {
                                          if (e.inner_iter == per_round - 1)
                                              log_info("round " + std::to_string(e.outer_round + 1) + "/" +
                                                       std::to_string(c.attack.t_out) + " L_cond " +
                                                       format_double(e.bundle.l_cond));
                                      });
    const std::string prefix = "protected_" + variant_name;
    const Tensor shown = png_safe_pixels(id.target.pixels, r.protected_images.pixels, c.attack.omega);
    write_image_batch(run.images(), prefix, r.protected_images, c.hash(), meta, &shown);
    write_run_log(run.logs() / ("attack_" + variant_name + ".csv"), r.log);
    write_sidecar(run.logs() / ("attack_" + variant_name + ".json"), c.hash(),
                  {{"variant", variant_name}, {"seed", c.attack.seed}, {"iterations", r.log.rows.size()}});
    if (r.used_apv) save_apv(run.checkpoints() / ("apv_" + variant_name), r.apv, c.hash());
    out << "protected " << r.protected_images.size() << " images with " << variant_name << " -> "
        << (run.images() / prefix).string() << "\n";
    return kExitOk;
}

void merge_report(const fs::path& path, const std::vector<std::vector<std::string>>& rows) {
    const std::vector<std::string> header = {"mechanism", "data",       "prompt",       "ism_proxy",
                                             "fdfr_proxy", "feature_fid", "fid_jittered", "config_hash"};
    std::vector<std::vector<std::string>> kept;
    if (fs::exists(path)) {
        std::istringstream in(read_text(path));
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (n == 1 || line.empty()) continue;
            auto f = csv_split(line, n);
            bool replaced = false;
            for (const auto& r : rows) replaced |= f.size() >= 3 && f[0] == r[0] && f[1] == r[1] && f[2] == r[2];
            if (!replaced) kept.push_back(std::move(f));
        }
    }
    std::string text = csv_row(header) + "\n";
    for (const auto& r : kept) text += csv_row(r) + "\n";
    for (const auto& r : rows) text += csv_row(r) + "\n";
    write_text(path, text);
}

int cmd_evaluate(const ExperimentConfig& c, const RunLayout& run, Mechanism mech, const std::string& data,
                 StageTag& tag, std::ostream& out) {
    tag.name = "evaluate";
    const DiffusionModel base = need_base(run);
    const CustomizedModel m = load_customized(base, run, mech, data);
    tag.name = "embedder";
    const Embedder emb = embedder_for(c, run);
    tag.name = "evaluate";
    const IdentityData id = identity_data(c.corpus, c.eval.identity);
    std::map<std::string, ImageBatch> samples;
    const MetricsReport r = evaluate_customized(base, m, c, id.reference, emb, stage_seed(c.seed, Stage::sample), &samples);
    const std::string name = std::string(to_string(mech)) + "_" + data;
    std::vector<std::vector<std::string>> rows;
    int k = 0;
    for (const auto& prompt : c.eval.prompts) {
        const PromptMetrics& pm = r.per_prompt.at(prompt);
        rows.push_back({to_string(mech), data, prompt, format_double(pm.ism), format_double(pm.fdfr),
                        format_double(pm.fid), pm.fid_jittered ? "1" : "0", c.hash()});
        write_image_batch(run.images(), "generated_" + name + "_p" + std::to_string(k++), samples.at(prompt), c.hash(),
                          {{"prompt", prompt}});
    }
    rows.push_back({to_string(mech), data, "mean", format_double(r.ism_proxy), format_double(r.fdfr_proxy),
                    format_double(r.feature_fid), "", c.hash()});
    merge_report(run.report(), rows);
    out << name << ": ism_proxy " << format_double(r.ism_proxy) << " (higher = closer to identity), fdfr_proxy "
        << format_double(r.fdfr_proxy) << ", feature_fid " << format_double(r.feature_fid) << "\n";
    return kExitOk;
}

int cmd_heatmap(const ExperimentConfig& c, const RunLayout& run, const Options& o, StageTag& tag, std::ostream& out) {
    tag.name = "heatmap";
    const DiffusionModel base = need_base(run);
    CustomizedModel m;
    if (o.model == "base") {
        m.unet = base.unet.clone();
    } else {
        const auto us = o.model.find('_');
        if (us == std::string::npos) throw ConfigError("--model must be 'base' or '<mechanism>_<data>'");
        m = load_customized(base, run, mechanism_from_string(o.model.substr(0, us)), o.model.substr(us + 1));
    }
    const ImageBatch imgs = instance_images(c, run, o.data);
    if (o.image_index < 0 || o.image_index >= imgs.size()) throw ConfigError("--index outside the image set");
    const std::string& prompt = c.dreambooth.instance_prompt;
    const PromptTokens tokens = tokenize(prompt, base.config.prompt_length);
    std::vector<int> positions;
    for (int i = 0; i < tokens.length(); ++i)
        if (tokens.ids[i] == Vocabulary::id(c.dreambooth.keyword)) positions.push_back(i);
    const PromptEmbedding emb = customized_prompts(base, m, {prompt}).at(prompt);
    const int t = o.heatmap_t >= 0 ? o.heatmap_t : c.eval.heatmap_t;
    const int res = o.resolution > 0 ? o.resolution : c.eval.heatmap_resolution;
    const Heatmaps h = attention_heatmap(m.unet, base.schedule, imgs.image(o.image_index), emb, positions, t, res,
                                         stage_seed(c.seed, Stage::sample));
    const std::string stem = "heatmap_" + o.model + "_" + o.data + "_" + std::to_string(o.image_index);
    write_png_gray(run.figures() / (stem + "_cross.png"), h.cross,
                   {{"config_hash", c.hash()}, {"module", h.cross_module}, {"degenerate", h.cross_degenerate ? "1" : "0"}});
    write_png_gray(run.figures() / (stem + "_self.png"), h.self,
                   {{"config_hash", c.hash()}, {"module", h.self_module}, {"degenerate", h.self_degenerate ? "1" : "0"}});
    write_png(run.figures() / (stem + "_image.png"), imgs.image(o.image_index), {{"config_hash", c.hash()}});
    out << "heatmaps (" << h.cross_module << ", " << h.self_module << ") written to " << run.figures().string() << "\n";
    return kExitOk;
}

int cmd_report(const ExperimentConfig& c, const RunLayout& run, StageTag& tag, std::ostream& out) {
    tag.name = "report";
    std::vector<std::pair<std::string, DynamicsSummary>> runs;
    json summary = json::object();
    std::vector<fs::path> logs;
    for (const auto& entry : fs::directory_iterator(run.logs())) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("attack_", 0) == 0 && entry.path().extension() == ".csv") logs.push_back(entry.path());
    }
    std::sort(logs.begin(), logs.end());
    if (logs.empty()) throw std::runtime_error("no attack logs in " + run.logs().string() + "; run attack first");
    for (const auto& p : logs) {
        const std::string variant = p.stem().string().substr(7);
        const DynamicsSummary s = dynamics_report(read_run_log(p), c.attack.alpha2);
        summary[variant] = {{"iterations", s.iterations},
                            {"final_loss", s.final_loss},
                            {"increment_variance", s.increment_variance},
                            {"score_variance", s.score_variance},
                            {"attn_score_variance", s.attn_score_variance}};
        out << variant << ": final_loss " << format_double(s.final_loss) << ", increment_variance "
            << format_double(s.increment_variance) << "\n";
        runs.emplace_back(variant, s);
    }
    plot_dynamics(run.figures() / "dynamics.png", runs, c.hash());
    write_sidecar(run.logs() / "dynamics_summary.json", c.hash(), {{"runs", summary}});
    return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Anti-customization lab: protect identity images against diffusion fine-tuning", "cloak"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "experiment config (JSON); defaults when omitted");
        sub->add_option("--run", o.run_dir, "run directory (overrides output_dir)");
        sub->add_option("--log-level", o.log_level, "debug, info, warn, error or off");
    };

    CLI::App* corpus = app.add_subcommand("corpus", "synthetic identity corpus");
    CLI::App* gen = corpus->add_subcommand("generate", "render the corpus to PNG files plus a manifest");
    corpus->require_subcommand(1);
    gen->add_option("--identities", o.identities)->capture_default_str();
    gen->add_option("--per-id", o.per_id)->capture_default_str();
    gen->add_option("--seed", o.corpus_seed, "corpus seed")->capture_default_str();
    gen->add_option("--render-seed", o.render_seed)->capture_default_str();
    gen->add_option("--image-size", o.image_size)->capture_default_str();
    gen->add_option("--out", o.out_dir)->required();
    gen->add_option("--log-level", o.log_level);

    CLI::App* train = app.add_subcommand("train-base", "pretrain the base diffusion model");
    CLI::App* db = app.add_subcommand("dreambooth", "Dreambooth fine-tuning on clean or protected images");
    CLI::App* lora = app.add_subcommand("lora", "LoRA fine-tuning on clean or protected images");
    CLI::App* ti = app.add_subcommand("ti", "textual inversion on clean or protected images");
    CLI::App* attack = app.add_subcommand("attack", "protect the target identity's images");
    CLI::App* evaluate = app.add_subcommand("evaluate", "score a customized model");
    CLI::App* heatmap = app.add_subcommand("heatmap", "attention heatmaps for one image");
    CLI::App* report = app.add_subcommand("report", "optimization-dynamics summary of attack logs");
    for (CLI::App* s : {train, db, lora, ti, attack, evaluate, heatmap, report}) add_common(s);
    for (CLI::App* s : {db, lora, ti, evaluate, heatmap})
        s->add_option("--data", o.data, "'clean' or an attack variant whose protected images to use")
            ->capture_default_str();
    attack->add_option("--variant", o.variant, "dadiff, single_step, cond_only_single_step, cond_only_lrtge, sa_only, ca_only")
        ->capture_default_str();
    evaluate->add_option("--mechanism", o.mechanism, "dreambooth, lora or ti")->capture_default_str();
    heatmap->add_option("--model", o.model, "'base' or '<mechanism>_<data>'")->capture_default_str();
    heatmap->add_option("--index", o.image_index, "image index")->capture_default_str();
    heatmap->add_option("--t", o.heatmap_t, "timestep (default from config)");
    heatmap->add_option("--resolution", o.resolution, "attention resolution (default from config)");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    StageTag tag;
    try {
        set_log_level(log_level_from_string(o.log_level));
        if (corpus->parsed()) {
            tag.name = "corpus";
            return cmd_corpus(o, out);
        }
        const ExperimentConfig c = load(o);
        const RunLayout run = open_run(c, o);
        if (train->parsed()) {
            tag.name = "train-base";
            return cmd_train_base(c, run, out);
        }
        if (db->parsed()) return cmd_customize(c, run, Mechanism::dreambooth, o.data, tag, out);
        if (lora->parsed()) return cmd_customize(c, run, Mechanism::lora, o.data, tag, out);
        if (ti->parsed()) return cmd_customize(c, run, Mechanism::ti, o.data, tag, out);
        if (attack->parsed()) return cmd_attack(c, run, o.variant, tag, out);
        if (evaluate->parsed()) return cmd_evaluate(c, run, mechanism_from_string(o.mechanism), o.data, tag, out);
        if (heatmap->parsed()) return cmd_heatmap(c, run, o, tag, out);
        if (report->parsed()) return cmd_report(c, run, tag, out);
        err << app.help();
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const StageError& e) {
        err << "error [" << tag.name << "/" << e.stage << "]: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error [" << tag.name << "]: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int run_command(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_command(args, std::cout, std::cerr);
}

}  // namespace cloak::cli
