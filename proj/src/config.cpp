#include "portrait/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "portrait/errors.hpp"
#include "portrait/image.hpp"

namespace portrait {

using json = nlohmann::json;

namespace {

enum class Kind { Int, Double, Bool, Str, U64 };

struct FieldRef {
    const char* section;
    const char* key;
    Kind kind;
    void* ptr;
};

std::vector<FieldRef> fields(Config& c) {
    return {
        {"model", "d", Kind::Int, &c.model.d},
        {"model", "refiner_layers", Kind::Int, &c.model.refiner_layers},
        {"model", "refiner_heads", Kind::Int, &c.model.refiner_heads},
        {"model", "t_local", Kind::Int, &c.model.t_local},
        {"model", "d1", Kind::Int, &c.model.d1},
        {"model", "d2", Kind::Int, &c.model.d2},
        {"model", "d_text", Kind::Int, &c.model.d_text},
        {"model", "t_text", Kind::Int, &c.model.t_text},
        {"model", "fusion_mode", Kind::Str, &c.model.fusion_mode},
        {"encoder", "backend", Kind::Str, &c.encoder.backend},
        {"encoder", "external_cmd", Kind::Str, &c.encoder.external_cmd},
        {"encoder", "seed", Kind::U64, &c.encoder.seed},
        {"encoder", "n_max", Kind::Int, &c.encoder.n_max},
        {"morphable", "n_id", Kind::Int, &c.morphable.n_id},
        {"morphable", "n_exp", Kind::Int, &c.morphable.n_exp},
        {"morphable", "model_seed", Kind::U64, &c.morphable.model_seed},
        {"morphable", "model_path", Kind::Str, &c.morphable.model_path},
        {"morphable", "fit_mu", Kind::Double, &c.morphable.fit_mu},
        {"morphable", "fit_tol", Kind::Double, &c.morphable.fit_tol},
        {"morphable", "fit_max_iters", Kind::Int, &c.morphable.fit_max_iters},
        {"diffusion", "image_size", Kind::Int, &c.diffusion.image_size},
        {"diffusion", "timesteps", Kind::Int, &c.diffusion.timesteps},
        {"diffusion", "beta_start", Kind::Double, &c.diffusion.beta_start},
        {"diffusion", "beta_end", Kind::Double, &c.diffusion.beta_end},
        {"diffusion", "unet_c0", Kind::Int, &c.diffusion.unet_c0},
        {"diffusion", "unet_c1", Kind::Int, &c.diffusion.unet_c1},
        {"diffusion", "unet_c2", Kind::Int, &c.diffusion.unet_c2},
        {"diffusion", "time_dim", Kind::Int, &c.diffusion.time_dim},
        {"diffusion", "heads", Kind::Int, &c.diffusion.heads},
        {"diffusion", "vae_c0", Kind::Int, &c.diffusion.vae_c0},
        {"diffusion", "vae_c1", Kind::Int, &c.diffusion.vae_c1},
        {"diffusion", "vae_c2", Kind::Int, &c.diffusion.vae_c2},
        {"diffusion", "model_seed", Kind::U64, &c.diffusion.model_seed},
        {"hifinet", "use_text", Kind::Bool, &c.hifinet.use_text},
        {"hifinet", "condition", Kind::Str, &c.hifinet.condition},
        {"hifinet", "residual_gain", Kind::Double, &c.hifinet.residual_gain},
        {"training", "lr", Kind::Double, &c.training.lr},
        {"training", "batch_size", Kind::Int, &c.training.batch_size},
        {"training", "alpha", Kind::Double, &c.training.alpha},
        {"training", "prompt_dropout", Kind::Double, &c.training.prompt_dropout},
        {"training", "n_refs_min", Kind::Int, &c.training.n_refs_min},
        {"training", "n_refs_max", Kind::Int, &c.training.n_refs_max},
        {"training", "id_loss_interval", Kind::Int, &c.training.id_loss_interval},
        {"training", "max_steps", Kind::Int, &c.training.max_steps},
        {"training", "seed", Kind::U64, &c.training.seed},
        {"training", "vae_pretrain_steps", Kind::Int, &c.training.vae_pretrain_steps},
        {"training", "vae_pretrain_lr", Kind::Double, &c.training.vae_pretrain_lr},
        {"training", "unet_pretrain_steps", Kind::Int, &c.training.unet_pretrain_steps},
        {"training", "unet_pretrain_lr", Kind::Double, &c.training.unet_pretrain_lr},
        {"selection", "lambda", Kind::Double, &c.selection.lambda},
        {"selection", "strategy", Kind::Str, &c.selection.strategy},
        {"selection", "manual_index", Kind::Int, &c.selection.manual_index},
        {"sampler", "steps", Kind::Int, &c.sampler.steps},
        {"sampler", "cfg_scale", Kind::Double, &c.sampler.cfg_scale},
        {"sampler", "seed", Kind::U64, &c.sampler.seed},
        {"sampler", "n_refs", Kind::Int, &c.sampler.n_refs},
        {"pipeline", "min_size", Kind::Int, &c.pipeline.min_size},
        {"pipeline", "area_ratio", Kind::Double, &c.pipeline.area_ratio},
        {"pipeline", "out_size", Kind::Int, &c.pipeline.out_size},
        {"pipeline", "quality_threshold", Kind::Double, &c.pipeline.quality_threshold},
        {"pipeline", "sim_threshold", Kind::Double, &c.pipeline.sim_threshold},
        {"pipeline", "kmeans_k", Kind::Int, &c.pipeline.kmeans_k},
        {"pipeline", "kmeans_restarts", Kind::Int, &c.pipeline.kmeans_restarts},
        {"pipeline", "kmeans_seed", Kind::U64, &c.pipeline.kmeans_seed},
        {"pipeline", "min_group", Kind::Int, &c.pipeline.min_group},
        {"pipeline", "occlusion_keywords", Kind::Str, &c.pipeline.occlusion_keywords},
    };
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

void assign(const FieldRef& f, const std::string& raw) {
    try {
        switch (f.kind) {
            case Kind::Int: {
                size_t pos = 0;
                int v = std::stoi(raw, &pos);
                if (pos != raw.size()) throw std::invalid_argument(raw);
                *static_cast<int*>(f.ptr) = v;
                break;
            }
            case Kind::Double: {
                size_t pos = 0;
                double v = std::stod(raw, &pos);
                if (pos != raw.size()) throw std::invalid_argument(raw);
                *static_cast<double*>(f.ptr) = v;
                break;
            }
            case Kind::Bool: {
                if (raw == "true" || raw == "1")
                    *static_cast<bool*>(f.ptr) = true;
                else if (raw == "false" || raw == "0")
                    *static_cast<bool*>(f.ptr) = false;
                else
                    throw std::invalid_argument(raw);
                break;
            }
            case Kind::Str:
                *static_cast<std::string*>(f.ptr) = raw;
                break;
            case Kind::U64: {
                size_t pos = 0;
                uint64_t v = std::stoull(raw, &pos);
                if (pos != raw.size()) throw std::invalid_argument(raw);
                *static_cast<uint64_t*>(f.ptr) = v;
                break;
            }
        }
    } catch (const std::exception&) {
        raise(ErrorCode::ConfigError,
              std::string("bad value for ") + f.section + "." + f.key + ": '" + raw + "'");
    }
}

std::string format_value(const FieldRef& f) {
    char buf[64];
    switch (f.kind) {
        case Kind::Int:
            std::snprintf(buf, sizeof buf, "%d", *static_cast<int*>(f.ptr));
            return buf;
        case Kind::Double:
            std::snprintf(buf, sizeof buf, "%.17g", *static_cast<double*>(f.ptr));
            return buf;
        case Kind::Bool:
            return *static_cast<bool*>(f.ptr) ? "true" : "false";
        case Kind::Str:
            return *static_cast<std::string*>(f.ptr);
        case Kind::U64:
            std::snprintf(buf, sizeof buf, "%llu",
                          static_cast<unsigned long long>(*static_cast<uint64_t*>(f.ptr)));
            return buf;
    }
    return "";
}

void validate(const Config& c) {
    auto bad = [](const std::string& what) { raise(ErrorCode::ConfigError, what); };
    if (c.model.t_local < 2) bad("model.t_local must be >= 2");
    if (c.model.fusion_mode != "local" && c.model.fusion_mode != "global" &&
        c.model.fusion_mode != "concat" && c.model.fusion_mode != "face-refiner")
        bad("model.fusion_mode must be local|global|concat|face-refiner");
    if (c.encoder.backend != "toy" && c.encoder.backend != "external")
        bad("encoder.backend must be toy|external");
    if (c.hifinet.condition != "landmarks" && c.hifinet.condition != "keypoints" &&
        c.hifinet.condition != "none-adapter")
        bad("hifinet.condition must be landmarks|keypoints|none-adapter");
    if (c.selection.strategy != "target" && c.selection.strategy != "random" &&
        c.selection.strategy != "quality" && c.selection.strategy != "angle" &&
        c.selection.strategy != "manual" && c.selection.strategy != "quality-angle")
        bad("selection.strategy must be target|random|quality|angle|manual|quality-angle");
    if (c.training.prompt_dropout < 0.0 || c.training.prompt_dropout > 1.0)
        bad("training.prompt_dropout must be in [0, 1]");
    if (c.training.alpha < 0.0) bad("training.alpha must be >= 0");
    if (c.training.n_refs_min < 1 || c.training.n_refs_max < c.training.n_refs_min ||
        c.training.n_refs_max > c.encoder.n_max)
        bad("training.n_refs range must satisfy 1 <= min <= max <= encoder.n_max");
    if (c.diffusion.image_size % 8 != 0) bad("diffusion.image_size must be divisible by 8");
    if (c.diffusion.timesteps < 1) bad("diffusion.timesteps must be >= 1");
    if (c.sampler.steps < 1 || c.sampler.steps > c.diffusion.timesteps)
        bad("sampler.steps must be in [1, diffusion.timesteps]");
    if (c.sampler.cfg_scale < 0.0) bad("sampler.cfg_scale must be >= 0");
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config c;
    auto refs = fields(c);
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                raise(ErrorCode::ConfigError, "malformed section at line " + std::to_string(line_no));
            section = trim(t.substr(1, t.size() - 2));
            bool known = false;
            for (const auto& f : refs)
                if (section == f.section) known = true;
            if (!known) raise(ErrorCode::ConfigError, "unknown section [" + section + "]");
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            raise(ErrorCode::ConfigError, "expected key = value at line " + std::to_string(line_no));
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        bool found = false;
        for (const auto& f : refs) {
            if (section == f.section && key == f.key) {
                assign(f, value);
                found = true;
                break;
            }
        }
        if (!found)
            raise(ErrorCode::ConfigError, "unknown key " + section + "." + key);
    }
    validate(c);
    return c;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::IOFailure, "cannot read config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string Config::canonical() const {
    Config& self = const_cast<Config&>(*this);
    auto refs = fields(self);
    std::string out;
    std::string current;
    for (const auto& f : refs) {
        if (current != f.section) {
            current = f.section;
            out += "[" + current + "]\n";
        }
        out += std::string(f.key) + " = " + format_value(f) + "\n";
    }
    return out;
}

std::string Config::to_json() const {
    Config& self = const_cast<Config&>(*this);
    json j;
    for (const auto& f : fields(self)) {
        switch (f.kind) {
            case Kind::Int: j[f.section][f.key] = *static_cast<int*>(f.ptr); break;
            case Kind::Double: j[f.section][f.key] = *static_cast<double*>(f.ptr); break;
            case Kind::Bool: j[f.section][f.key] = *static_cast<bool*>(f.ptr); break;
            case Kind::Str: j[f.section][f.key] = *static_cast<std::string*>(f.ptr); break;
            case Kind::U64: j[f.section][f.key] = *static_cast<uint64_t*>(f.ptr); break;
        }
    }
    return j.dump();
}

Config Config::from_json(const std::string& json_text) {
    json j = json::parse(json_text, nullptr, false);
    if (j.is_discarded()) raise(ErrorCode::ConfigError, "malformed config JSON");
    Config c;
    for (const auto& f : fields(c)) {
        if (!j.contains(f.section) || !j[f.section].contains(f.key)) continue;
        const json& v = j[f.section][f.key];
        switch (f.kind) {
            case Kind::Int: *static_cast<int*>(f.ptr) = v.get<int>(); break;
            case Kind::Double: *static_cast<double*>(f.ptr) = v.get<double>(); break;
            case Kind::Bool: *static_cast<bool*>(f.ptr) = v.get<bool>(); break;
            case Kind::Str: *static_cast<std::string*>(f.ptr) = v.get<std::string>(); break;
            case Kind::U64: *static_cast<uint64_t*>(f.ptr) = v.get<uint64_t>(); break;
        }
    }
    validate(c);
    return c;
}

std::string Config::hash() const {
    std::string text = canonical();
    return hex64(fnv1a64(text.data(), text.size()));
}

}  // namespace portrait
