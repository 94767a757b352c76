#include "portrait/generate.hpp"

#include <algorithm>
#include <filesystem>

#include <json.hpp>

#include "portrait/errors.hpp"

namespace portrait {

using json = nlohmann::json;
namespace fs = std::filesystem;

GenerationResult run_generate(ModelState& model, const GenerationRequest& req) {
    const Config& cfg = model.cfg;
    if (req.refs.empty()) raise(ErrorCode::NoFaceFound, "generate: no reference images");

    GenerationResult result;
    result.n_used = std::min<int>(static_cast<int>(req.refs.size()), cfg.sampler.n_refs);
    std::vector<ImageTensor> refs(req.refs.begin(), req.refs.begin() + result.n_used);

    FixtureKeypointExtractor fixture_kps;
    for (size_t i = 0; i < req.ref_kps.size() && i < refs.size(); ++i)
        fixture_kps.register_image(refs[i], req.ref_kps[i]);
    if (req.target_kps) fixture_kps.register_image(req.target, *req.target_kps);
    DetectorKeypointExtractor detector_kps(&model.backend, &model.morph);
    ChainedKeypointExtractor extractor;
    extractor.add(&fixture_kps);
    extractor.add(&detector_kps);

    // Reference selection for the landmark source (Eq-9-style scoring).
    result.selection = select_reference(
        refs, req.target, model.backend, model.morph, extractor, cfg.selection.lambda,
        selection_strategy_from_string(cfg.selection.strategy), cfg.selection.manual_index,
        req.seed);
    const ImageTensor& landmark_src =
        result.selection.index < 0 ? req.target : refs[static_cast<size_t>(result.selection.index)];

    const int size = cfg.diffusion.image_size;
    ImageTensor condition = make_condition_image(landmark_src, req.target, model.morph, extractor,
                                                 size, cfg.hifinet.condition);

    // Reference features through the refiner (or the fusion-mode variant).
    auto [local, global] = encode_references(refs, model.backend, cfg.encoder.n_max);
    Tensor tokens_flat;
    {
        Graph g;
        std::vector<V> tokens = fuse_reference_tokens(g, local, global, model.refiner, model.fusion);
        tokens_flat = g.val(flatten_tokens_graph(g, tokens));
    }

    Tensor z_lmk = vae_encode(condition, model.vae);
    TextEmbedding cond_text = model.backend.encode_text(req.prompt);
    TextEmbedding null_text =
        TextEmbedding::null_embedding(cfg.model.t_text, cfg.model.d_text);

    const bool adapter_mode = cfg.hifinet.condition == "none-adapter";
    const double w = cfg.sampler.cfg_scale;
    SamplerStats stats;
    auto guided = [&](const Tensor& z_t, int t) {
        // Unconditional branch: null text and a zeroed control path.
        Tensor eps_null = denoise(z_t, t, null_text, nullptr, model.unet);
        Tensor eps_cond;
        if (adapter_mode) {
            eps_cond = denoise(z_t, t, cond_text, nullptr, model.unet, &model.adapter, &tokens_flat);
        } else {
            ControlResidualValues res =
                hifinet_forward_values(z_t, t, z_lmk, tokens_flat, &cond_text, model.hifinet);
            eps_cond = denoise(z_t, t, cond_text, &res, model.unet);
        }
        Tensor out = eps_null;
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] += w * (eps_cond.data[i] - eps_null.data[i]);
        return out;
    };
    result.image = ddim_sample(guided, model.vae, model.schedule, cfg.sampler.steps, size / 8,
                               size / 8, req.seed, &stats);

    json sidecar;
    sidecar["config_hash"] = cfg.hash();
    sidecar["seed"] = req.seed;
    sidecar["prompt"] = req.prompt;
    sidecar["steps"] = cfg.sampler.steps;
    sidecar["cfg_scale"] = cfg.sampler.cfg_scale;
    sidecar["n_used"] = result.n_used;
    sidecar["condition"] = cfg.hifinet.condition;
    sidecar["fusion_mode"] = cfg.model.fusion_mode;
    sidecar["selection"] = {{"strategy", result.selection.strategy},
                            {"index", result.selection.index}};
    json scores = json::array();
    for (const FaceScore& s : result.selection.scores)
        scores.push_back({{"quality", s.quality},
                          {"angle", s.angle},
                          {"total", s.total},
                          {"lambda", s.lambda}});
    sidecar["scores"] = scores;
    sidecar["denoiser_evals_per_branch"] = stats.denoiser_evals;
    result.sidecar_json = sidecar.dump(2);
    return result;
}

std::string AblateReport::to_json() const {
    json j;
    j["axis"] = axis;
    j["config_hash"] = config_hash;
    json rows_j = json::array();
    for (const AblateRow& row : rows) {
        json r;
        r["value"] = row.value;
        r["grid_image"] = row.grid_image;
        r["report"] = json::parse(row.report.to_json());
        rows_j.push_back(std::move(r));
    }
    j["rows"] = rows_j;
    return j.dump(2);
}

namespace {
std::vector<std::string> axis_values(const std::string& axis) {
    if (axis == "fusion_mode") return {"local", "global", "concat", "face-refiner"};
    if (axis == "condition_type") return {"none-adapter", "keypoints", "landmarks"};
    if (axis == "n_refs") return {"1", "2", "3", "4", "5", "6"};
    if (axis == "selection_strategy")
        return {"target", "random", "quality", "angle", "manual", "quality-angle"};
    raise(ErrorCode::UnknownAxis, axis);
}

ImageTensor hstack(const std::vector<ImageTensor>& imgs) {
    int h = imgs[0].height, w = 0;
    for (const auto& img : imgs) w += img.width;
    ImageTensor out(h, w);
    int x0 = 0;
    for (const auto& img : imgs) {
        for (int y = 0; y < img.height && y < h; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = img.at(y, x, c);
        x0 += img.width;
    }
    return out;
}
}  // namespace

AblateReport run_ablate(ModelState& model, const std::string& axis, const TrainingSet& eval_set,
                        const std::string& out_dir, int samples_per_value) {
    AblateReport report;
    report.axis = axis;
    report.config_hash = model.cfg.hash();
    std::vector<std::string> values = axis_values(axis);
    fs::create_directories(out_dir);

    if (eval_set.images.size() < 2)
        raise(ErrorCode::InsufficientSamples, "ablate: evaluation set needs >= 2 images");

    // Saved switches; every row runs on a temporary configuration.
    Config saved_cfg = model.cfg;
    FusionMode saved_fusion = model.fusion;

    for (const std::string& value : values) {
        model.cfg = saved_cfg;
        model.fusion = saved_fusion;
        if (axis == "fusion_mode") {
            model.cfg.model.fusion_mode = value;
            model.fusion = fusion_mode_from_string(value);
        } else if (axis == "condition_type") {
            model.cfg.hifinet.condition = value;
        } else if (axis == "n_refs") {
            model.cfg.sampler.n_refs = std::stoi(value);
        } else if (axis == "selection_strategy") {
            model.cfg.selection.strategy = value;
        }

        std::vector<ImageTensor> generated, targets;
        std::vector<ImageTensor> refs(eval_set.images.begin(),
                                      eval_set.images.begin() +
                                          std::min<size_t>(eval_set.images.size(), 6));
        for (int s = 0; s < samples_per_value; ++s) {
            size_t tgt = (s + 1) % eval_set.images.size();
            GenerationRequest req;
            req.refs = refs;
            for (const auto& img : refs) {
                auto kps = eval_set.extractor.extract(img);
                req.ref_kps.push_back(kps ? *kps : Keypoints2D{});
            }
            req.target = eval_set.images[tgt];
            req.target_kps = eval_set.extractor.extract(req.target);
            req.prompt = "a portrait photo";
            req.seed = 1000 + static_cast<uint64_t>(s);
            GenerationResult gen = run_generate(model, req);
            generated.push_back(gen.image);
            targets.push_back(req.target);
        }

        AblateRow row;
        row.value = value;
        row.report = evaluate_images(generated, refs, targets, model, eval_set.extractor);
        row.grid_image = out_dir + "/" + axis + "_" + value + ".png";
        write_png(row.grid_image, hstack(generated));
        report.rows.push_back(std::move(row));
    }

    model.cfg = saved_cfg;
    model.fusion = saved_fusion;
    return report;
}

}  // namespace portrait
