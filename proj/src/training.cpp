#include "portrait/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"

namespace portrait {

namespace fs = std::filesystem;

ModelState ModelState::build(const Config& cfg) {
    ModelState s;
    s.cfg = cfg;
    ToyBackendConfig bc;
    bc.seed = cfg.encoder.seed;
    bc.d1 = cfg.model.d1;
    bc.d2 = cfg.model.d2;
    bc.t_local = cfg.model.t_local;
    bc.d_text = cfg.model.d_text;
    bc.t_text = cfg.model.t_text;
    s.backend = ToyBackend(bc);
    s.morph = cfg.morphable.model_path.empty()
                  ? make_toy_morphable_model(cfg.morphable.n_id, cfg.morphable.n_exp,
                                             cfg.morphable.model_seed)
                  : load_morphable_model(cfg.morphable.model_path);
    s.schedule = NoiseSchedule::linear(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                                       cfg.diffusion.beta_end);
    {
        Rng rng(cfg.diffusion.model_seed);
        s.vae = VaeParams(cfg.diffusion.vae_c0, cfg.diffusion.vae_c1, cfg.diffusion.vae_c2, rng);
    }
    {
        Rng rng(cfg.diffusion.model_seed + 1);
        s.unet = UNetParams(cfg.diffusion.unet_c0, cfg.diffusion.unet_c1, cfg.diffusion.unet_c2,
                            cfg.model.d_text, cfg.diffusion.time_dim, cfg.diffusion.heads, rng);
    }
    {
        Rng rng(cfg.diffusion.model_seed + 2);
        s.refiner = RefinerParams(cfg.model.d1, cfg.model.d2, cfg.model.d,
                                  cfg.model.refiner_heads, cfg.model.refiner_layers, rng);
    }
    {
        Rng rng(cfg.diffusion.model_seed + 3);
        s.hifinet = HiFiNetParams(s.unet, cfg.model.d, cfg.hifinet.use_text, rng,
                                  cfg.hifinet.residual_gain);
    }
    {
        Rng rng(cfg.diffusion.model_seed + 4);
        s.adapter = AdapterParams(cfg.diffusion.unet_c0, cfg.diffusion.unet_c1,
                                  cfg.diffusion.unet_c2, cfg.model.d, rng);
    }
    s.fusion = fusion_mode_from_string(cfg.model.fusion_mode);
    s.apply_trainability();
    return s;
}

std::vector<ParamTensor*> ModelState::trainable_params() {
    std::vector<ParamTensor*> out;
    refiner.collect(out);
    if (cfg.hifinet.condition == "none-adapter")
        adapter.collect(out);
    else
        hifinet.collect(out);
    return out;
}

std::vector<ParamTensor*> ModelState::frozen_params() {
    std::vector<ParamTensor*> out;
    vae.collect(out);
    unet.collect(out);
    return out;
}

void ModelState::apply_trainability() {
    vae.set_trainable(false);
    unet.set_trainable(false);
    refiner.set_trainable(true);
    hifinet.set_trainable(cfg.hifinet.condition != "none-adapter");
    adapter.set_trainable(cfg.hifinet.condition == "none-adapter");
}

double loss_sd(const Tensor& eps, const Tensor& eps_hat) {
    if (!eps.same_shape(eps_hat)) raise(ErrorCode::DimensionMismatch, "loss_sd: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < eps.data.size(); ++i) {
        double d = eps.data[i] - eps_hat.data[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

V loss_sd_graph(Graph& g, const Tensor& eps, V eps_hat) {
    if (!eps.same_shape(g.val(eps_hat)))
        raise(ErrorCode::DimensionMismatch, "loss_sd: shape mismatch");
    return g.sqrt_elem(g.sumsq(g.sub(g.input(eps), eps_hat)));
}

double loss_id(const ImageTensor& x0_hat, const Tensor& f_id, const DetectorFn& detector,
               const EmbedFn& embedder) {
    int gate = detector(x0_hat);
    if (gate == 0) return 0.0;
    Tensor e = embedder(x0_hat);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < f_id.numel(); ++i) {
        dot += f_id.data[i] * e.data[i];
        na += f_id.data[i] * f_id.data[i];
        nb += e.data[i] * e.data[i];
    }
    double cosine = dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    return gate * (1.0 - cosine);
}

double total_loss(double l_sd, double l_id, double alpha) { return l_sd + alpha * l_id; }

bool drop_prompt(Rng& rng, double p) { return rng.uniform() < p; }

void init_train_state(ModelState& model, TrainState& state, uint64_t seed) {
    state.step = 0;
    state.rng = Rng(seed);
    state.frozen_crc = frozen_checksum(model);
}

uint32_t frozen_checksum(ModelState& model) {
    std::vector<ParamTensor*> frozen = model.frozen_params();
    return params_checksum(frozen);
}

void assert_frozen(ModelState& model, const TrainState& state) {
    if (frozen_checksum(model) != state.frozen_crc)
        raise(ErrorCode::FrozenParameterMutation, "frozen parameters changed during training");
}

SampleLoss build_sample_loss_graph(Graph& g, ModelState& model, const TrainSample& sample,
                                   int t, const Tensor& eps, const TextEmbedding& text,
                                   bool dropped, bool apply_id, const DetectorFn& detector) {
    const Config& cfg = model.cfg;
    const bool adapter_mode = cfg.hifinet.condition == "none-adapter";

    // Frozen encode paths run as plain values.
    auto [local, global] = encode_references(sample.references, model.backend, cfg.encoder.n_max);
    Tensor f_id = Tensor::zeros({global.d2});
    for (int r = 0; r < global.n; ++r)
        for (int k = 0; k < global.d2; ++k)
            f_id.data[k] += global.embedding.at3(r, 0, k) / global.n;

    Tensor z0 = vae_encode(sample.target, model.vae);
    Tensor z_lmk = vae_encode(sample.landmark, model.vae);
    Tensor z_t = add_noise(z0, t, eps, model.schedule);

    V z_t_node = g.input(z_t);
    V eps_hat{};
    if (dropped) {
        eps_hat = denoise_graph(g, z_t_node, t, text, nullptr, model.unet);
    } else {
        std::vector<V> tokens = fuse_reference_tokens(g, local, global, model.refiner, model.fusion);
        V flat = flatten_tokens_graph(g, tokens);
        if (adapter_mode) {
            eps_hat = denoise_graph(g, z_t_node, t, text, nullptr, model.unet, &model.adapter,
                                    &flat);
        } else {
            ControlResiduals res =
                hifinet_forward(g, z_t_node, t, g.input(z_lmk), flat, &text, model.hifinet);
            eps_hat = denoise_graph(g, z_t_node, t, text, &res, model.unet);
        }
    }

    SampleLoss out;
    out.l_sd = loss_sd_graph(g, eps, eps_hat);

    if (apply_id) {
        // One-step closed-form denoised estimate x0_hat.
        double sa = std::sqrt(model.schedule.alphas_bar[static_cast<size_t>(t)]);
        double sb = std::sqrt(1.0 - model.schedule.alphas_bar[static_cast<size_t>(t)]);
        V z0_hat = g.scale(g.sub(z_t_node, g.scale(eps_hat, sb)), 1.0 / sa);
        V x0_hat = vae_decode_graph(g, z0_hat, model.vae);
        ImageTensor decoded = ImageTensor::from_chw(g.val(x0_hat));
        out.gate = detector(decoded);
        if (out.gate != 0) {
            V emb = model.backend.embed_global_graph(g, x0_hat);  // unit norm
            Tensor f_id_unit = f_id;
            double nrm = 0.0;
            for (double v : f_id_unit.data) nrm += v * v;
            nrm = std::sqrt(nrm) + 1e-12;
            for (double& v : f_id_unit.data) v /= nrm;
            V cosine = g.dot(g.input(f_id_unit), emb);
            out.l_id = g.add_scalar(g.scale(cosine, -1.0), 1.0);
            out.has_id = true;
        }
    }
    return out;
}

LossReport train_step(ModelState& model, TrainState& state,
                      const std::vector<TrainSample>& batch,
                      const DetectorFn* detector_override) {
    if (batch.empty()) raise(ErrorCode::InsufficientSamples, "train_step: empty batch");
    const Config& cfg = model.cfg;
    std::vector<ParamTensor*> trainables = model.trainable_params();
    zero_gradients(trainables);

    DetectorFn detector = detector_override
                              ? *detector_override
                              : DetectorFn([&](const ImageTensor& img) {
                                    return model.backend.detect(img).empty() ? 0 : 1;
                                });

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const bool apply_id =
        cfg.training.alpha > 0.0 &&
        (state.step % std::max(1, cfg.training.id_loss_interval) == 0);

    LossReport report;
    report.id_applied = apply_id;
    for (const TrainSample& sample : batch) {
        int t = static_cast<int>(state.rng.uniform_int(static_cast<uint64_t>(model.schedule.T)));
        Tensor eps = Tensor::randn({4, sample.target.height / 8, sample.target.width / 8},
                                   state.rng);
        // Joint unconditional branch: null text AND a zeroed control path.
        bool dropped = drop_prompt(state.rng, cfg.training.prompt_dropout);
        if (dropped) report.dropped++;
        TextEmbedding text = dropped
                                 ? TextEmbedding::null_embedding(cfg.model.t_text, cfg.model.d_text)
                                 : model.backend.encode_text(sample.caption);

        Graph g;
        SampleLoss loss = build_sample_loss_graph(g, model, sample, t, eps, text, dropped,
                                                  apply_id, detector);
        report.l_sd += g.val(loss.l_sd).data[0] * inv_b;
        V sample_loss = loss.l_sd;
        if (loss.has_id) {
            report.gated_on++;
            report.l_id += g.val(loss.l_id).data[0] * inv_b;
            sample_loss = g.add(sample_loss, g.scale(loss.l_id, cfg.training.alpha));
        }
        g.backward(g.scale(sample_loss, inv_b));
    }

    state.step++;
    adam_update(trainables, cfg.training.lr, state.step);
    report.l_total = report.l_sd + cfg.training.alpha * report.l_id;
    return report;
}

ImageTensor make_condition_image(const ImageTensor& ref_image, const ImageTensor& tgt_image,
                                 const MorphableModel& model, const KeypointExtractor& extractor,
                                 int size, const std::string& condition) {
    if (condition == "none-adapter") return ImageTensor(size, size);
    if (condition == "keypoints") {
        auto ref_kps = extractor.extract(ref_image);
        if (!ref_kps) raise(ErrorCode::NoFaceFound, "condition image: reference", 0);
        auto tgt_kps = extractor.extract(tgt_image);
        if (!tgt_kps) raise(ErrorCode::NoFaceFound, "condition image: target", 1);
        MorphParams combined = compose_params(fit_morphable(*ref_kps, model).params,
                                              fit_morphable(*tgt_kps, model).params);
        Keypoints2D kps = project_shape(synth_shape(model, combined), combined.pose);
        return render_keypoints5(kps, size, size);
    }
    return generate_landmark(ref_image, tgt_image, model, extractor, size, size);
}

void TrainingSet::add(const ImageTensor& image, const Keypoints2D& kps, const std::string& caption,
                      const std::string& identity) {
    images.push_back(image);
    captions.push_back(caption);
    identities.push_back(identity);
    extractor.register_image(image, kps);
}

TrainingSet TrainingSet::from_directory(const std::string& dir) {
    TrainingSet set;
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".png") paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    for (const std::string& path : paths) {
        ImageTensor img = read_png(path);
        auto kps = read_fixture_keypoints(path);
        auto meta = read_fixture_meta(path);
        std::string caption = "a portrait photo";
        std::string identity = "unknown";
        if (meta) {
            identity = meta->claimed_id;
            caption = "a portrait of a person with " + meta->hair_name + " hair on a " +
                      meta->background_name + " background";
        }
        if (kps) set.add(img, *kps, caption, identity);
    }
    if (set.images.empty())
        raise(ErrorCode::InsufficientSamples, "no usable training images in " + dir);
    return set;
}

TrainSample make_train_sample(const TrainingSet& set, ModelState& model, Rng& rng) {
    const Config& cfg = model.cfg;
    const int n_total = static_cast<int>(set.images.size());
    if (n_total < 2) raise(ErrorCode::InsufficientSamples, "need at least 2 images per identity");
    int target = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_total)));

    int span = cfg.training.n_refs_max - cfg.training.n_refs_min + 1;
    int want = cfg.training.n_refs_min + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(span)));
    int n = std::min(want, n_total - 1);

    std::vector<int> pool;
    for (int i = 0; i < n_total; ++i)
        if (i != target) pool.push_back(i);
    for (size_t i = pool.size(); i > 1; --i)
        std::swap(pool[i - 1], pool[static_cast<size_t>(rng.uniform_int(i))]);

    TrainSample sample;
    sample.target = set.images[static_cast<size_t>(target)];
    sample.caption = set.captions[static_cast<size_t>(target)];
    for (int i = 0; i < n; ++i)
        sample.references.push_back(set.images[static_cast<size_t>(pool[static_cast<size_t>(i)])]);

    // One reference, chosen at random, supplies the landmark identity.
    int lm = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
    sample.landmark =
        make_condition_image(sample.references[static_cast<size_t>(lm)], sample.target, model.morph,
                             set.extractor, cfg.diffusion.image_size, cfg.hifinet.condition);
    return sample;
}

std::vector<TrainSample> make_batch(const TrainingSet& set, ModelState& model, Rng& rng,
                                    int batch_size) {
    std::vector<TrainSample> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) batch.push_back(make_train_sample(set, model, rng));
    return batch;
}

}  // namespace portrait
