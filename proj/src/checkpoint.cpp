#include "portrait/checkpoint.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <vector>

#include "portrait/errors.hpp"

namespace portrait {

namespace {

const char kMagic[5] = {'H', 'F', 'P', 'C', '1'};
const int32_t kVersion = 1;

std::vector<unsigned char> params_to_f32(const std::vector<ParamTensor*>& params) {
    size_t total = 0;
    for (const ParamTensor* p : params) total += p->value.data.size();
    std::vector<unsigned char> out(total * 4);
    size_t off = 0;
    for (const ParamTensor* p : params)
        for (double v : p->value.data) {
            float f = static_cast<float>(v);
            std::memcpy(out.data() + off, &f, 4);
            off += 4;
        }
    return out;
}

void f32_to_params(const std::vector<unsigned char>& blob, const std::vector<ParamTensor*>& params,
                   const std::string& section) {
    size_t total = 0;
    for (const ParamTensor* p : params) total += p->value.data.size();
    if (blob.size() != total * 4)
        raise(ErrorCode::IOFailure, "checkpoint section '" + section + "' has wrong size");
    size_t off = 0;
    for (ParamTensor* p : params)
        for (double& v : p->value.data) {
            float f;
            std::memcpy(&f, blob.data() + off, 4);
            v = static_cast<double>(f);
            off += 4;
        }
}

void write_section(FILE* f, const std::string& name, const std::vector<unsigned char>& payload) {
    int32_t name_len = static_cast<int32_t>(name.size());
    std::fwrite(&name_len, 4, 1, f);
    std::fwrite(name.data(), 1, name.size(), f);
    uint64_t len = payload.size();
    std::fwrite(&len, 8, 1, f);
    std::fwrite(payload.data(), 1, payload.size(), f);
    uint32_t crc = static_cast<uint32_t>(crc32(0, payload.data(), static_cast<uInt>(payload.size())));
    std::fwrite(&crc, 4, 1, f);
}

struct Section {
    std::string name;
    std::vector<unsigned char> payload;
};

std::vector<Section> read_sections(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) raise(ErrorCode::CheckpointNotFound, path);
    char magic[5];
    if (std::fread(magic, 1, 5, f) != 5 || std::memcmp(magic, kMagic, 5) != 0) {
        std::fclose(f);
        raise(ErrorCode::IOFailure, "bad checkpoint magic: " + path);
    }
    int32_t version = 0;
    if (std::fread(&version, 4, 1, f) != 1 || version != kVersion) {
        std::fclose(f);
        raise(ErrorCode::IOFailure, "unsupported checkpoint version");
    }
    std::vector<Section> sections;
    while (true) {
        int32_t name_len = 0;
        size_t got = std::fread(&name_len, 4, 1, f);
        if (got != 1) break;  // EOF
        if (name_len <= 0 || name_len > 256) {
            std::fclose(f);
            raise(ErrorCode::IOFailure, "corrupt checkpoint section name");
        }
        Section s;
        s.name.resize(static_cast<size_t>(name_len));
        uint64_t len = 0;
        if (std::fread(s.name.data(), 1, s.name.size(), f) != s.name.size() ||
            std::fread(&len, 8, 1, f) != 1) {
            std::fclose(f);
            raise(ErrorCode::IOFailure, "truncated checkpoint");
        }
        s.payload.resize(static_cast<size_t>(len));
        uint32_t crc = 0;
        if ((len > 0 && std::fread(s.payload.data(), 1, s.payload.size(), f) != s.payload.size()) ||
            std::fread(&crc, 4, 1, f) != 1) {
            std::fclose(f);
            raise(ErrorCode::IOFailure, "truncated checkpoint");
        }
        uint32_t want = static_cast<uint32_t>(
            crc32(0, s.payload.data(), static_cast<uInt>(s.payload.size())));
        if (crc != want) {
            std::fclose(f);
            raise(ErrorCode::IOFailure, "checkpoint CRC mismatch in section '" + s.name + "'");
        }
        sections.push_back(std::move(s));
    }
    std::fclose(f);
    return sections;
}

std::vector<ParamTensor*> hifinet_section_params(ModelState& model) {
    std::vector<ParamTensor*> ps;
    model.hifinet.collect(ps);
    model.adapter.collect(ps);
    return ps;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelState& model) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) raise(ErrorCode::IOFailure, "cannot write checkpoint: " + path);
    std::fwrite(kMagic, 1, 5, f);
    std::fwrite(&kVersion, 4, 1, f);

    std::vector<ParamTensor*> refiner_ps, vae_ps, unet_ps;
    model.refiner.collect(refiner_ps);
    model.vae.collect(vae_ps);
    model.unet.collect(unet_ps);
    write_section(f, "refiner", params_to_f32(refiner_ps));
    std::vector<ParamTensor*> hifi_ps = hifinet_section_params(model);
    write_section(f, "hifinet", params_to_f32(hifi_ps));
    write_section(f, "vae", params_to_f32(vae_ps));
    write_section(f, "unet", params_to_f32(unet_ps));
    std::string cfg = model.cfg.to_json();
    write_section(f, "config", std::vector<unsigned char>(cfg.begin(), cfg.end()));
    std::fclose(f);
}

Config load_checkpoint_config(const std::string& path) {
    for (const Section& s : read_sections(path))
        if (s.name == "config")
            return Config::from_json(std::string(s.payload.begin(), s.payload.end()));
    raise(ErrorCode::IOFailure, "checkpoint has no config section: " + path);
}

void load_checkpoint(const std::string& path, ModelState& model) {
    bool saw_refiner = false, saw_hifinet = false, saw_vae = false, saw_unet = false;
    for (const Section& s : read_sections(path)) {
        if (s.name == "refiner") {
            std::vector<ParamTensor*> ps;
            model.refiner.collect(ps);
            f32_to_params(s.payload, ps, s.name);
            saw_refiner = true;
        } else if (s.name == "hifinet") {
            std::vector<ParamTensor*> ps = hifinet_section_params(model);
            f32_to_params(s.payload, ps, s.name);
            saw_hifinet = true;
        } else if (s.name == "vae") {
            std::vector<ParamTensor*> ps;
            model.vae.collect(ps);
            f32_to_params(s.payload, ps, s.name);
            saw_vae = true;
        } else if (s.name == "unet") {
            std::vector<ParamTensor*> ps;
            model.unet.collect(ps);
            f32_to_params(s.payload, ps, s.name);
            saw_unet = true;
        }
    }
    if (!saw_refiner || !saw_hifinet || !saw_vae || !saw_unet)
        raise(ErrorCode::IOFailure, "checkpoint missing required sections: " + path);
    model.apply_trainability();
}

ModelState load_checkpoint_state(const std::string& path) {
    Config cfg = load_checkpoint_config(path);
    ModelState model = ModelState::build(cfg);
    load_checkpoint(path, model);
    return model;
}

}  // namespace portrait
