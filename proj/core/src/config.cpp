#include "cloak/config.hpp"

#include <cstdlib>
#include <json.hpp>
#include <set>

#include "cloak/errors.hpp"
#include "cloak/io.hpp"

namespace cloak {

using nlohmann::json;

namespace {

// Reads one JSON object section, collecting type errors and unknown keys.
class Section {
public:
    Section(const json& parent, const std::string& name, std::vector<std::string>& errors)
        : prefix_(name.empty() ? "" : name + "."), errors_(errors) {
        if (name.empty()) {
            obj_ = &parent;
        } else if (parent.contains(name)) {
            obj_ = &parent.at(name);
        }
        if (obj_ && !obj_->is_object()) {
            errors_.push_back(name + ": expected an object");
            obj_ = nullptr;
        }
    }

    template <class T>
    void read(const std::string& key, T& out) {
        known_.insert(key);
        if (!obj_ || !obj_->contains(key)) return;
        const json& v = obj_->at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
                if constexpr (std::is_unsigned_v<T>) {
                    if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
                        throw std::invalid_argument("expected a non-negative integer");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw std::invalid_argument("expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw std::invalid_argument("expected a string");
            }
            out = v.get<T>();
        } catch (const std::exception& e) {
            errors_.push_back(prefix_ + key + ": " + e.what());
        }
    }

    void finish() {
        if (!obj_) return;
        for (const auto& [key, value] : obj_->items())
            if (!known_.count(key)) errors_.push_back(prefix_ + key + ": unknown field");
    }

    void note_child(const std::string& key) { known_.insert(key); }

private:
    const json* obj_ = nullptr;
    std::string prefix_;
    std::vector<std::string>& errors_;
    std::set<std::string> known_;
};

const char* capture_name(CaptureSet c) { return c == CaptureSet::all ? "all" : "up"; }

json to_json(const ExperimentConfig& c, bool with_output) {
    json j;
    j["seed"] = c.seed;
    if (with_output) j["output_dir"] = c.output_dir;
    j["corpus"] = {{"seed", c.corpus.seed},
                   {"identities", c.corpus.identities},
                   {"per_id", c.corpus.per_id},
                   {"image_size", c.corpus.image_size},
                   {"render_seed", c.corpus.render_seed},
                   {"embedder_render_seed", c.corpus.embedder_render_seed},
                   {"embedder_per_id", c.corpus.embedder_per_id}};
    j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
    j["model"] = {{"base_channels", c.model.base_channels},
                  {"mid_channels", c.model.mid_channels},
                  {"embed_dim", c.model.embed_dim},
                  {"prompt_length", c.model.prompt_length},
                  {"time_dim", c.model.time_dim},
                  {"groups", c.model.groups},
                  {"mid_attention", c.model.mid_attention},
                  {"capture", capture_name(c.model.capture)},
                  {"init_seed", c.model.init_seed}};
    j["base"] = {{"steps", c.base.steps},
                 {"batch", c.base.batch},
                 {"lr", c.base.lr},
                 {"identity_offset", c.base.identity_offset},
                 {"identity_count", c.base.identity_count},
                 {"prompts", c.base.prompts}};
    const auto& d = c.dreambooth;
    j["dreambooth"] = {{"lr", d.lr},
                       {"steps", d.steps},
                       {"surrogate_steps", d.surrogate_steps},
                       {"surrogate_lr", d.surrogate_lr},
                       {"optimizer", to_string(d.optimizer)},
                       {"batch", d.batch},
                       {"lambda", d.lambda},
                       {"instance_prompt", d.instance_prompt},
                       {"base_prompt", d.base_prompt},
                       {"class_image_count", d.class_image_count},
                       {"class_sample_steps", d.class_sample_steps},
                       {"keyword", d.keyword},
                       {"lora_rank", d.lora_rank},
                       {"lora_scale", d.lora_scale},
                       {"lora_lr", d.lora_lr},
                       {"ti_lr", d.ti_lr}};
    const auto& a = c.attack;
    j["attack"] = {{"B", a.B},
                   {"alpha1", a.alpha1},
                   {"alpha2", a.alpha2},
                   {"apv_rounds", a.apv_rounds},
                   {"eta_apv", a.eta_apv},
                   {"t_out", a.t_out},
                   {"t_in", a.t_in},
                   {"R", a.rounds()},
                   {"omega", a.omega},
                   {"eta", a.eta},
                   {"ca_similarity", a.ca_similarity},
                   {"seed", a.seed}};
    const auto& e = c.eval;
    j["eval"] = {{"tau", e.tau},
                 {"samples", e.samples},
                 {"ddim_steps", e.ddim_steps},
                 {"heatmap_t", e.heatmap_t},
                 {"heatmap_resolution", e.heatmap_resolution},
                 {"identity", e.identity},
                 {"prompts", e.prompts},
                 {"embedder",
                  {{"embed_dim", e.embedder.embed_dim},
                   {"width", e.embedder.width},
                   {"steps", e.embedder.steps},
                   {"batch", e.embedder.batch},
                   {"lr", e.embedder.lr},
                   {"noise_augment", e.embedder.noise_augment},
                   {"min_accuracy", e.embedder.min_accuracy}}}};
    return j;
}

template <class F>
void guard(std::vector<std::string>& errors, const std::string& field, F&& check) {
    try {
        check();
    } catch (const ConfigError& e) {
        errors.push_back(field + ": " + e.what());
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    std::vector<std::string> errors;
    if (corpus.identities < 2) errors.push_back("corpus.identities: must be >= 2");
    if (corpus.per_id < 2 || corpus.per_id % 2 != 0) errors.push_back("corpus.per_id: must be even and >= 2");
    if (corpus.embedder_per_id < 1) errors.push_back("corpus.embedder_per_id: must be >= 1");
    guard(errors, "corpus.image_size", [&] { validate_image_size(corpus.image_size); });
    if (schedule.T < 2) errors.push_back("schedule.T: must be >= 2");
    if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1.0))
        errors.push_back("schedule: need 0 < beta_start <= beta_end < 1");
    guard(errors, "model", [&] {
        ModelConfig m = model;
        m.image_size = corpus.image_size;
        m.validate();
    });
    guard(errors, "base", [&] { base.validate(); });
    guard(errors, "dreambooth", [&] { dreambooth.validate(); });
    {
        const PromptTokens inst = tokenize(dreambooth.instance_prompt, model.prompt_length);
        bool has_keyword = false;
        for (int id : inst.ids) has_keyword |= id == Vocabulary::id(dreambooth.keyword);
        if (!has_keyword || Vocabulary::id(dreambooth.keyword) == Vocabulary::kUnknown)
            errors.push_back("dreambooth.keyword: must be a vocabulary word present in instance_prompt");
    }
    if (attack.T != schedule.T) errors.push_back("attack.T: must equal schedule.T");
    try {
        attack.validate();
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
    }
    if (!(eval.tau > 0.0 && eval.tau < 1.0)) errors.push_back("eval.tau: must lie in (0, 1)");
    if (eval.samples < 2) errors.push_back("eval.samples: must be >= 2");
    if (eval.ddim_steps < 1 || schedule.T % eval.ddim_steps != 0)
        errors.push_back("eval.ddim_steps: must divide schedule.T");
    if (dreambooth.class_sample_steps < 1 || schedule.T % dreambooth.class_sample_steps != 0)
        errors.push_back("dreambooth.class_sample_steps: must divide schedule.T");
    if (eval.heatmap_t < 0 || eval.heatmap_t >= schedule.T) errors.push_back("eval.heatmap_t: must lie in [0, T)");
    if (eval.heatmap_resolution != corpus.image_size && eval.heatmap_resolution != corpus.image_size / 2 &&
        eval.heatmap_resolution != corpus.image_size / 4)
        errors.push_back("eval.heatmap_resolution: no attention layer at that resolution");
    if (eval.identity < 0 || eval.identity >= corpus.identities)
        errors.push_back("eval.identity: must index a corpus identity");
    if (eval.prompts.empty()) errors.push_back("eval.prompts: must not be empty");
    guard(errors, "eval.embedder", [&] { eval.embedder.validate(); });
    if (errors.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
}

std::string ExperimentConfig::canonical_json() const { return to_json(*this, false).dump(); }

std::string ExperimentConfig::hash() const { return sha256_hex(canonical_json()); }

NoiseSchedule ExperimentConfig::build_schedule() const {
    return build_linear_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
}

std::filesystem::path default_output_root() {
    const char* env = std::getenv("CLOAK_OUTPUT_ROOT");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

ExperimentConfig parse_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config must be a JSON object");
    ExperimentConfig c;
    std::vector<std::string> errors;

    Section top(root, "", errors);
    top.read("seed", c.seed);
    top.read("output_dir", c.output_dir);
    for (const char* s : {"corpus", "schedule", "model", "base", "dreambooth", "attack", "eval"}) top.note_child(s);
    top.finish();

    Section corpus(root, "corpus", errors);
    corpus.read("seed", c.corpus.seed);
    corpus.read("identities", c.corpus.identities);
    corpus.read("per_id", c.corpus.per_id);
    corpus.read("image_size", c.corpus.image_size);
    corpus.read("render_seed", c.corpus.render_seed);
    corpus.read("embedder_render_seed", c.corpus.embedder_render_seed);
    corpus.read("embedder_per_id", c.corpus.embedder_per_id);
    corpus.finish();

    Section sched(root, "schedule", errors);
    sched.read("T", c.schedule.T);
    sched.read("beta_start", c.schedule.beta_start);
    sched.read("beta_end", c.schedule.beta_end);
    sched.finish();

    Section model(root, "model", errors);
    model.read("base_channels", c.model.base_channels);
    model.read("mid_channels", c.model.mid_channels);
    model.read("embed_dim", c.model.embed_dim);
    model.read("prompt_length", c.model.prompt_length);
    model.read("time_dim", c.model.time_dim);
    model.read("groups", c.model.groups);
    model.read("mid_attention", c.model.mid_attention);
    model.read("init_seed", c.model.init_seed);
    std::string capture = capture_name(c.model.capture);
    model.read("capture", capture);
    if (capture == "all") c.model.capture = CaptureSet::all;
    else if (capture == "up") c.model.capture = CaptureSet::up;
    else errors.push_back("model.capture: expected 'up' or 'all'");
    model.finish();

    Section base(root, "base", errors);
    base.read("steps", c.base.steps);
    base.read("batch", c.base.batch);
    base.read("lr", c.base.lr);
    base.read("identity_offset", c.base.identity_offset);
    base.read("identity_count", c.base.identity_count);
    base.read("prompts", c.base.prompts);
    base.finish();

    Section db(root, "dreambooth", errors);
    auto& d = c.dreambooth;
    db.read("lr", d.lr);
    db.read("steps", d.steps);
    db.read("surrogate_steps", d.surrogate_steps);
    db.read("surrogate_lr", d.surrogate_lr);
    std::string opt = to_string(d.optimizer);
    db.read("optimizer", opt);
    try {
        d.optimizer = optimizer_from_string(opt);
    } catch (const ConfigError& e) {
        errors.push_back(std::string("dreambooth.optimizer: ") + e.what());
    }
    db.read("batch", d.batch);
    db.read("lambda", d.lambda);
    db.read("instance_prompt", d.instance_prompt);
    db.read("base_prompt", d.base_prompt);
    db.read("class_image_count", d.class_image_count);
    db.read("class_sample_steps", d.class_sample_steps);
    db.read("keyword", d.keyword);
    db.read("lora_rank", d.lora_rank);
    db.read("lora_scale", d.lora_scale);
    db.read("lora_lr", d.lora_lr);
    db.read("ti_lr", d.ti_lr);
    db.finish();

    Section atk(root, "attack", errors);
    auto& a = c.attack;
    atk.read("B", a.B);
    atk.read("alpha1", a.alpha1);
    atk.read("alpha2", a.alpha2);
    atk.read("apv_rounds", a.apv_rounds);
    atk.read("eta_apv", a.eta_apv);
    atk.read("t_out", a.t_out);
    atk.read("t_in", a.t_in);
    int R = -1;
    atk.read("R", R);
    atk.read("omega", a.omega);
    atk.read("eta", a.eta);
    atk.read("ca_similarity", a.ca_similarity);
    atk.read("seed", a.seed);
    atk.finish();
    if (R != -1 && R != a.t_out * a.t_in) errors.push_back("attack.R: must equal t_out * t_in");
    a.T = c.schedule.T;

    Section ev(root, "eval", errors);
    auto& e = c.eval;
    ev.read("tau", e.tau);
    ev.read("samples", e.samples);
    ev.read("ddim_steps", e.ddim_steps);
    ev.read("heatmap_t", e.heatmap_t);
    ev.read("heatmap_resolution", e.heatmap_resolution);
    ev.read("identity", e.identity);
    ev.read("prompts", e.prompts);
    ev.note_child("embedder");
    ev.finish();
    json eval_obj = root.contains("eval") && root["eval"].is_object() ? root["eval"] : json::object();
    Section emb(eval_obj, "embedder", errors);
    emb.read("embed_dim", e.embedder.embed_dim);
    emb.read("width", e.embedder.width);
    emb.read("steps", e.embedder.steps);
    emb.read("batch", e.embedder.batch);
    emb.read("lr", e.embedder.lr);
    emb.read("noise_augment", e.embedder.noise_augment);
    emb.read("min_accuracy", e.embedder.min_accuracy);
    emb.finish();

    c.model.image_size = c.corpus.image_size;
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& err : errors) msg += "\n  " + err;
        throw ConfigError(msg);
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_text(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text);
}

std::string config_to_json(const ExperimentConfig& config) { return to_json(config, true).dump(2) + "\n"; }

}  // namespace cloak
