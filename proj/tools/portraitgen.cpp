// portraitgen: identity-preserving portrait generation at desk scale.
// Subcommands: pipeline run, train, generate, select-refs, evaluate, ablate,
// make-fixtures. Exit codes: 0 success, 2 validation error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "portrait/checkpoint.hpp"
#include "portrait/dataset_pipeline.hpp"
#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"
#include "portrait/generate.hpp"
#include "portrait/metrics.hpp"
#include "portrait/training.hpp"

using namespace portrait;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

Config load_config_or_default(const std::string& path) {
    if (path.empty()) return Config{};
    return Config::load(path);
}

std::vector<std::string> sorted_pngs(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".png") paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    return paths;
}

GenerationRequest build_request(const std::string& refs_dir, const std::string& target_path,
                                const std::string& prompt, uint64_t seed) {
    GenerationRequest req;
    for (const std::string& p : sorted_pngs(refs_dir)) {
        req.refs.push_back(read_png(p));
        auto kps = read_fixture_keypoints(p);
        req.ref_kps.push_back(kps ? *kps : Keypoints2D{});
    }
    req.target = read_png(target_path);
    auto tkps = read_fixture_keypoints(target_path);
    if (tkps) req.target_kps = *tkps;
    req.prompt = prompt;
    req.seed = seed;
    return req;
}

int cmd_pipeline(const std::string& input, const std::string& out, const std::string& config_path,
                 const std::string& stages_csv) {
    Config cfg = load_config_or_default(config_path);
    std::vector<std::string> stages;
    std::stringstream ss(stages_csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) stages.push_back(tok);
    ToyBackendConfig bc;
    bc.seed = cfg.encoder.seed;
    bc.d1 = cfg.model.d1;
    bc.d2 = cfg.model.d2;
    bc.t_local = cfg.model.t_local;
    ToyBackend backend(bc);
    PipelineRunReport report =
        run_pipeline(input, out, cfg, backend, default_pipeline_hooks(), stages);
    json j;
    j["input_count"] = report.input_count;
    j["accepted"] = report.accepted;
    j["rejections_by_stage"] = report.rejections_by_stage;
    j["manifest"] = report.manifest_path;
    j["config_hash"] = cfg.hash();
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              const std::string& resume, int log_every) {
    ModelState model = resume.empty() ? ModelState::build(load_config_or_default(config_path))
                                      : load_checkpoint_state(resume);
    TrainingSet set = TrainingSet::from_directory(data_dir);
    const Config& cfg = model.cfg;

    if (resume.empty() && cfg.training.vae_pretrain_steps > 0) {
        std::fprintf(stderr, "[train] pretraining VAE (%d steps)\n",
                     cfg.training.vae_pretrain_steps);
        VaePretrainReport vrep = vae_pretrain(model.vae, set.images, cfg.training.vae_pretrain_steps,
                                              cfg.training.vae_pretrain_lr, cfg.training.seed);
        std::fprintf(stderr, "[train] VAE reconstruction PSNR %.2f dB\n", vrep.psnr);
    }
    if (resume.empty() && cfg.training.unet_pretrain_steps > 0) {
        std::fprintf(stderr, "[train] pretraining base denoiser (%d steps)\n",
                     cfg.training.unet_pretrain_steps);
        UnetPretrainReport urep =
            unet_pretrain(model.unet, model.vae, model.schedule, set.images,
                          cfg.training.unet_pretrain_steps, cfg.training.unet_pretrain_lr,
                          cfg.training.seed + 1, cfg.model.t_text, cfg.model.d_text);
        std::fprintf(stderr, "[train] base denoiser loss %.4f -> %.4f\n", urep.first_loss,
                     urep.final_loss);
    }

    TrainState st;
    init_train_state(model, st, cfg.training.seed);
    Rng data_rng(cfg.training.seed ^ 0xabcdef);
    for (int step = 0; step < cfg.training.max_steps; ++step) {
        auto batch = make_batch(set, model, data_rng, cfg.training.batch_size);
        LossReport rep = train_step(model, st, batch);
        if (log_every > 0 && (step % log_every == 0 || step + 1 == cfg.training.max_steps))
            std::fprintf(stderr, "[train] step %d l_sd %.4f l_id %.4f l_total %.4f\n", step,
                         rep.l_sd, rep.l_id, rep.l_total);
    }
    assert_frozen(model, st);
    save_checkpoint(out, model);
    std::fprintf(stderr, "[train] wrote %s\n", out.c_str());
    return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& refs_dir, const std::string& target,
                 const std::string& prompt, const std::string& out, int steps, double cfg_scale,
                 uint64_t seed, int size) {
    if (!fs::exists(ckpt)) raise(ErrorCode::CheckpointNotFound, ckpt);
    ModelState model = load_checkpoint_state(ckpt);
    if (steps > 0) model.cfg.sampler.steps = steps;
    if (cfg_scale >= 0) model.cfg.sampler.cfg_scale = cfg_scale;
    if (size > 0) {
        if (size % 8 != 0) raise(ErrorCode::ConfigError, "--size must be divisible by 8");
        model.cfg.diffusion.image_size = size;
    }
    GenerationRequest req = build_request(refs_dir, target, prompt, seed);
    GenerationResult res = run_generate(model, req);
    write_png(out, res.image);
    std::ofstream(out + ".json") << res.sidecar_json << "\n";
    std::cout << res.sidecar_json << "\n";
    return 0;
}

int cmd_select_refs(const std::string& refs_dir, const std::string& target_path, double lambda,
                    const std::string& strategy, const std::string& config_path) {
    Config cfg = load_config_or_default(config_path);
    cfg.selection.lambda = lambda;
    cfg.selection.strategy = strategy;
    ModelState model = ModelState::build(cfg);
    GenerationRequest req = build_request(refs_dir, target_path, "", 0);

    FixtureKeypointExtractor fixture_kps;
    for (size_t i = 0; i < req.refs.size(); ++i)
        if (req.ref_kps[i].size() > 0) fixture_kps.register_image(req.refs[i], req.ref_kps[i]);
    if (req.target_kps) fixture_kps.register_image(req.target, *req.target_kps);
    DetectorKeypointExtractor detector_kps(&model.backend, &model.morph);
    ChainedKeypointExtractor extractor;
    extractor.add(&fixture_kps);
    extractor.add(&detector_kps);

    SelectionResult sel = select_reference(req.refs, req.target, model.backend, model.morph,
                                           extractor, lambda,
                                           selection_strategy_from_string(strategy),
                                           cfg.selection.manual_index, 0);
    json j;
    j["strategy"] = sel.strategy;
    j["selected_index"] = sel.index;
    j["lambda"] = lambda;
    j["config_hash"] = cfg.hash();
    json scores = json::array();
    for (const auto& s : sel.scores)
        scores.push_back({{"quality", s.quality}, {"angle", s.angle}, {"total", s.total}});
    j["scores"] = scores;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_evaluate(const std::string& generated, const std::string& refs, const std::string& targets,
                 const std::string& out, const std::string& ckpt, const std::string& config_path) {
    ModelState model = ckpt.empty() ? ModelState::build(load_config_or_default(config_path))
                                    : load_checkpoint_state(ckpt);
    EvalReport report = evaluate_directories(generated, refs, targets, model);
    std::ofstream(out) << report.to_json() << "\n";
    std::cout << report.to_json() << "\n";
    return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& axis, const std::string& data_dir,
               const std::string& out_dir, int samples) {
    if (!fs::exists(ckpt)) raise(ErrorCode::CheckpointNotFound, ckpt);
    ModelState model = load_checkpoint_state(ckpt);
    TrainingSet set = TrainingSet::from_directory(data_dir);
    AblateReport report = run_ablate(model, axis, set, out_dir, samples);
    fs::create_directories(out_dir);
    std::ofstream(out_dir + "/ablate_" + axis + ".json") << report.to_json() << "\n";
    std::cout << report.to_json() << "\n";
    return 0;
}

int cmd_make_fixtures(const std::string& out_dir, const std::string& kind, int ids, int images,
                      int size, uint64_t seed) {
    if (kind == "corpus") {
        CorpusPlan plan;
        plan.dir = out_dir;
        plan.identities = ids;
        plan.images_per_identity = images;
        plan.image_size = size;
        plan.seed = seed;
        make_pipeline_corpus(plan);
        std::fprintf(stderr, "[fixtures] wrote corpus with planted violations to %s\n",
                     out_dir.c_str());
    } else if (kind == "group") {
        MorphableModel model = make_toy_morphable_model();
        write_identity_group(out_dir, model, seed, images, size, seed * 31 + 7);
        std::fprintf(stderr, "[fixtures] wrote identity group to %s\n", out_dir.c_str());
    } else if (kind == "model") {
        MorphableModel model = make_toy_morphable_model(8, 6, seed);
        fs::create_directories(out_dir);
        save_morphable_model(out_dir + "/toy_model.hfpm", model);
        std::fprintf(stderr, "[fixtures] wrote morphable model fixture\n");
    } else {
        raise(ErrorCode::ConfigError, "--kind must be corpus|group|model");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"portraitgen: multi-reference identity-preserving portrait generation"};
    app.require_subcommand(1);

    // pipeline run
    auto* pipeline = app.add_subcommand("pipeline", "dataset construction pipeline");
    auto* pipeline_run = pipeline->add_subcommand("run", "run the curation stages");
    std::string pl_input, pl_out, pl_config, pl_stages = "detect,cleanse,verify,caption";
    pipeline_run->add_option("--input", pl_input, "image directory or manifest")->required();
    pipeline_run->add_option("--out", pl_out, "output directory")->required();
    pipeline_run->add_option("--config", pl_config, "config file");
    pipeline_run->add_option("--stages", pl_stages, "comma-separated stage list");

    // train
    auto* train = app.add_subcommand("train", "train the refiner and control branch");
    std::string tr_config, tr_data, tr_out = "checkpoint.hfpc", tr_resume;
    int tr_log_every = 100;
    train->add_option("--config", tr_config, "config file");
    train->add_option("--data", tr_data, "training image directory")->required();
    train->add_option("--out", tr_out, "checkpoint output path");
    train->add_option("--resume", tr_resume, "checkpoint to resume from");
    train->add_option("--log-every", tr_log_every, "steps between log lines");

    // generate
    auto* gen = app.add_subcommand("generate", "generate a portrait from references");
    std::string g_ckpt, g_refs, g_target, g_prompt = "a portrait photo", g_out = "out.png";
    int g_steps = 0, g_size = 0;
    double g_cfg_scale = -1;
    uint64_t g_seed = 0;
    gen->add_option("--ckpt", g_ckpt, "trained checkpoint")->required();
    gen->add_option("--refs", g_refs, "reference image directory")->required();
    gen->add_option("--target", g_target, "target image (expression/pose source)")->required();
    gen->add_option("--prompt", g_prompt, "text prompt");
    gen->add_option("--out", g_out, "output PNG path");
    gen->add_option("--steps", g_steps, "DDIM steps (default from config)");
    gen->add_option("--cfg-scale", g_cfg_scale, "classifier-free guidance scale");
    gen->add_option("--seed", g_seed, "sampler seed (64-bit)");
    gen->add_option("--size", g_size, "output image size (divisible by 8)");

    // select-refs
    auto* sel = app.add_subcommand("select-refs", "score and select the landmark reference");
    std::string s_refs, s_target, s_strategy = "quality-angle", s_config;
    double s_lambda = 0.5;
    sel->add_option("--refs", s_refs, "reference image directory")->required();
    sel->add_option("--target", s_target, "target image")->required();
    sel->add_option("--lambda", s_lambda, "angle score weight");
    sel->add_option("--strategy", s_strategy,
                    "target|random|quality|angle|manual|quality-angle");
    sel->add_option("--config", s_config, "config file");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "compute the evaluation metrics");
    std::string e_generated, e_refs, e_targets, e_out = "report.json", e_ckpt, e_config;
    eval->add_option("--generated", e_generated, "generated image directory")->required();
    eval->add_option("--refs", e_refs, "reference image directory")->required();
    eval->add_option("--targets", e_targets, "target image directory");
    eval->add_option("--out", e_out, "report output path");
    eval->add_option("--ckpt", e_ckpt, "checkpoint (for encoder config)");
    eval->add_option("--config", e_config, "config file (when no checkpoint)");

    // ablate
    auto* abl = app.add_subcommand("ablate", "run one ablation axis");
    std::string a_ckpt, a_axis, a_data, a_out = "ablate_out";
    int a_samples = 2;
    abl->add_option("--ckpt", a_ckpt, "trained checkpoint")->required();
    abl->add_option("--axis", a_axis, "fusion_mode|condition_type|n_refs|selection_strategy")
        ->required();
    abl->add_option("--data", a_data, "evaluation image directory")->required();
    abl->add_option("--out", a_out, "output directory");
    abl->add_option("--samples", a_samples, "generations per axis value");

    // make-fixtures
    auto* fix = app.add_subcommand("make-fixtures", "write synthetic fixture data");
    std::string f_out, f_kind = "group";
    int f_ids = 5, f_images = 8, f_size = 64;
    uint64_t f_seed = 7;
    fix->add_option("--out", f_out, "output directory")->required();
    fix->add_option("--kind", f_kind, "corpus|group|model");
    fix->add_option("--ids", f_ids, "identities (corpus)");
    fix->add_option("--images", f_images, "images per identity");
    fix->add_option("--size", f_size, "image size");
    fix->add_option("--seed", f_seed, "fixture seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (pipeline_run->parsed()) return cmd_pipeline(pl_input, pl_out, pl_config, pl_stages);
        if (train->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_log_every);
        if (gen->parsed())
            return cmd_generate(g_ckpt, g_refs, g_target, g_prompt, g_out, g_steps, g_cfg_scale,
                                g_seed, g_size);
        if (sel->parsed()) return cmd_select_refs(s_refs, s_target, s_lambda, s_strategy, s_config);
        if (eval->parsed())
            return cmd_evaluate(e_generated, e_refs, e_targets, e_out, e_ckpt, e_config);
        if (abl->parsed()) return cmd_ablate(a_ckpt, a_axis, a_data, a_out, a_samples);
        if (fix->parsed()) return cmd_make_fixtures(f_out, f_kind, f_ids, f_images, f_size, f_seed);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.code()) {
            case ErrorCode::ConfigError:
            case ErrorCode::UnknownAxis:
            case ErrorCode::IndexOutOfRange:
                return 2;
            default:
                return 3;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
