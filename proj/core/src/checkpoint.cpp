#include "cloak/checkpoint.hpp"

#include "cloak/errors.hpp"

namespace cloak {

namespace {

std::map<std::string, std::string> model_meta(const ModelConfig& c, const NoiseSchedule& s) {
    return {{"kind", "model"},
            {"image_size", std::to_string(c.image_size)},
            {"base_channels", std::to_string(c.base_channels)},
            {"mid_channels", std::to_string(c.mid_channels)},
            {"embed_dim", std::to_string(c.embed_dim)},
            {"prompt_length", std::to_string(c.prompt_length)},
            {"time_dim", std::to_string(c.time_dim)},
            {"groups", std::to_string(c.groups)},
            {"mid_attention", c.mid_attention ? "1" : "0"},
            {"capture", c.capture == CaptureSet::all ? "all" : "up"},
            {"init_seed", std::to_string(c.init_seed)},
            {"T", std::to_string(s.T)},
            {"beta_start", format_double(s.beta_start)},
            {"beta_end", format_double(s.beta_end)}};
}

const std::string& need(const std::map<std::string, std::string>& meta, const std::string& key) {
    const auto it = meta.find(key);
    if (it == meta.end()) throw IntegrityError("checkpoint manifest lacks '" + key + "'");
    return it->second;
}

void check_kind(const ArchiveManifest& m, const char* kind) {
    if (need(m.meta, "kind") != kind)
        throw IntegrityError(std::string("checkpoint holds a ") + need(m.meta, "kind") + ", expected " + kind);
}

void copy_into(ParameterStore& store, const ArrayMap& arrays, const std::string& prefix) {
    for (const auto& [name, var] : store.all()) {
        const auto it = arrays.find(prefix + name);
        if (it == arrays.end()) throw IntegrityError("checkpoint lacks array " + prefix + name);
        if (it->second.shape() != var.shape())
            throw IntegrityError("shape mismatch for " + prefix + name + ": " + shape_str(it->second.shape()));
        store.get(name).mutable_value() = it->second;
    }
}

}  // namespace

ArrayMap model_arrays(const DiffusionModel& model) {
    ArrayMap out;
    for (const auto& [name, v] : model.encoder.params().all()) out["encoder." + name] = v.value();
    for (const auto& [name, v] : model.unet.params().all()) out["unet." + name] = v.value();
    return out;
}

std::string model_digest(const DiffusionModel& model) { return arrays_digest(model_arrays(model)); }

ArchiveManifest save_model(const fs::path& stem, const DiffusionModel& model, const std::string& config_hash) {
    return save_archive(stem, model_arrays(model), config_hash, model_meta(model.config, model.schedule));
}

DiffusionModel load_model(const fs::path& stem, ArchiveManifest* manifest) {
    ArchiveManifest m;
    const ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "model");
    ModelConfig c;
    try {
        c.image_size = std::stoi(need(m.meta, "image_size"));
        c.base_channels = std::stoi(need(m.meta, "base_channels"));
        c.mid_channels = std::stoi(need(m.meta, "mid_channels"));
        c.embed_dim = std::stoi(need(m.meta, "embed_dim"));
        c.prompt_length = std::stoi(need(m.meta, "prompt_length"));
        c.time_dim = std::stoi(need(m.meta, "time_dim"));
        c.groups = std::stoi(need(m.meta, "groups"));
        c.mid_attention = need(m.meta, "mid_attention") == "1";
        c.capture = need(m.meta, "capture") == "all" ? CaptureSet::all : CaptureSet::up;
        c.init_seed = std::stoull(need(m.meta, "init_seed"));
    } catch (const std::logic_error& e) {
        throw IntegrityError(std::string("bad model manifest: ") + e.what());
    }
    const NoiseSchedule s = build_linear_schedule(std::stoi(need(m.meta, "T")), std::stod(need(m.meta, "beta_start")),
                                                  std::stod(need(m.meta, "beta_end")));
    DiffusionModel model = DiffusionModel::create(c, s);
    copy_into(model.encoder.params(), arrays, "encoder.");
    copy_into(model.unet.params(), arrays, "unet.");
    if (arrays.size() != model.encoder.params().all().size() + model.unet.params().all().size())
        throw IntegrityError("checkpoint holds unexpected arrays");
    if (manifest) *manifest = m;
    return model;
}

ArchiveManifest save_unet(const fs::path& stem, const NoisePredictor& unet, const std::string& config_hash) {
    ArrayMap arrays;
    for (const auto& [name, v] : unet.params().all()) arrays["unet." + name] = v.value();
    return save_archive(stem, arrays, config_hash, {{"kind", "unet"}});
}

void load_unet_into(const fs::path& stem, NoisePredictor& unet) {
    ArchiveManifest m;
    const ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "unet");
    copy_into(unet.params(), arrays, "unet.");
}

ArchiveManifest save_lora(const fs::path& stem, const LoraAdapter& adapter, const std::string& config_hash) {
    ArrayMap arrays;
    for (const auto& [name, v] : adapter.params().all()) arrays[name] = v.value();
    return save_archive(stem, arrays, config_hash,
                        {{"kind", "lora"}, {"rank", std::to_string(adapter.rank())}, {"scale", format_double(adapter.scale())}});
}

std::shared_ptr<LoraAdapter> load_lora(const fs::path& stem) {
    ArchiveManifest m;
    const ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "lora");
    ParameterStore store;
    for (const auto& [name, t] : arrays) store.add(name, t);
    return std::make_shared<LoraAdapter>(std::stoi(need(m.meta, "rank")), std::stod(need(m.meta, "scale")),
                                         std::move(store));
}

ArchiveManifest save_ti(const fs::path& stem, const TIEmbedding& ti, const std::string& config_hash) {
    return save_archive(stem, {{"row", ti.row}}, config_hash, {{"kind", "ti"}, {"token_id", std::to_string(ti.token_id)}});
}

TIEmbedding load_ti(const fs::path& stem) {
    ArchiveManifest m;
    ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "ti");
    if (!arrays.count("row")) throw IntegrityError("TI checkpoint lacks row");
    return {std::stoi(need(m.meta, "token_id")), std::move(arrays["row"])};
}

ArchiveManifest save_apv(const fs::path& stem, const APVState& apv, const std::string& config_hash) {
    Tensor losses({static_cast<int>(apv.losses.size())});
    for (std::size_t i = 0; i < apv.losses.size(); ++i) losses[i] = apv.losses[i];
    return save_archive(stem, {{"embedding", apv.embedding.matrix}, {"losses", losses}}, config_hash,
                        {{"kind", "apv"},
                         {"iterations_done", std::to_string(apv.iterations_done)},
                         {"lr", format_double(apv.lr)},
                         {"seed", std::to_string(apv.seed)}});
}

APVState load_apv(const fs::path& stem) {
    ArchiveManifest m;
    ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "apv");
    if (!arrays.count("embedding") || !arrays.count("losses")) throw IntegrityError("APV checkpoint lacks arrays");
    APVState s;
    s.embedding = {std::move(arrays["embedding"]), PromptSource::adversarial};
    s.iterations_done = std::stoi(need(m.meta, "iterations_done"));
    s.lr = std::stod(need(m.meta, "lr"));
    s.seed = std::stoull(need(m.meta, "seed"));
    for (double v : arrays["losses"].values()) s.losses.push_back(v);
    return s;
}

}  // namespace cloak

namespace cloak {

ArchiveManifest save_embedder(const fs::path& stem, const Embedder& embedder, const EmbedderConfig& config,
                              const std::string& config_hash) {
    ArrayMap arrays;
    for (const auto& [name, v] : embedder.params().all()) arrays[name] = v.value();
    std::string classes;
    for (int c : embedder.classes()) classes += (classes.empty() ? "" : ",") + std::to_string(c);
    return save_archive(stem, arrays, config_hash,
                        {{"kind", "embedder"},
                         {"image_size", std::to_string(embedder.image_size())},
                         {"classes", classes},
                         {"embed_dim", std::to_string(config.embed_dim)},
                         {"width", std::to_string(config.width)},
                         {"loo_accuracy", format_double(embedder.loo_accuracy)}});
}

Embedder load_embedder(const fs::path& stem) {
    ArchiveManifest m;
    const ArrayMap arrays = load_archive(stem, &m);
    check_kind(m, "embedder");
    EmbedderConfig c;
    std::vector<int> classes;
    int image_size = 0;
    double loo = 0.0;
    try {
        c.embed_dim = std::stoi(need(m.meta, "embed_dim"));
        c.width = std::stoi(need(m.meta, "width"));
        image_size = std::stoi(need(m.meta, "image_size"));
        loo = std::stod(need(m.meta, "loo_accuracy"));
        const std::string& list = need(m.meta, "classes");
        std::size_t pos = 0;
        while (pos < list.size()) {
            const std::size_t comma = std::min(list.find(',', pos), list.size());
            classes.push_back(std::stoi(list.substr(pos, comma - pos)));
            pos = comma + 1;
        }
    } catch (const std::logic_error& e) {
        throw IntegrityError(std::string("bad embedder manifest: ") + e.what());
    }
    Embedder e(image_size, classes, c, 0);
    copy_into(e.params(), arrays, "");
    if (arrays.size() != e.params().all().size()) throw IntegrityError("checkpoint holds unexpected arrays");
    e.loo_accuracy = loo;
    return e;
}

}  // namespace cloak
