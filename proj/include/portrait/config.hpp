#pragma once

#include <cstdint>
#include <string>

namespace portrait {

// Typed configuration covering every module's tunables. The on-disk format is
// a sectioned key=value text file; unknown sections or keys are rejected.
// Defaults below are the desk-scale values; paper-scale settings (d=2048,
// d1=1280, d2=512, 1024px images) are reachable through the same keys.
struct Config {
    struct Model {
        int d = 64;
        int refiner_layers = 2;
        int refiner_heads = 4;
        int t_local = 257;
        int d1 = 32;
        int d2 = 16;
        int d_text = 16;
        int t_text = 8;
        std::string fusion_mode = "face-refiner";  // local|global|concat|face-refiner
    } model;

    struct Encoder {
        std::string backend = "toy";  // toy|external
        std::string external_cmd;
        uint64_t seed = 1234;
        int n_max = 8;
    } encoder;

    struct Morphable {
        int n_id = 8;
        int n_exp = 6;
        uint64_t model_seed = 20240501;
        std::string model_path;  // empty: derive the toy model from model_seed
        double fit_mu = 1e-3;
        double fit_tol = 1e-8;
        int fit_max_iters = 50;
    } morphable;

    struct Diffusion {
        int image_size = 64;
        int timesteps = 1000;
        double beta_start = 1e-4;
        double beta_end = 2e-2;
        int unet_c0 = 16, unet_c1 = 32, unet_c2 = 64;
        int time_dim = 64;
        int heads = 4;
        int vae_c0 = 8, vae_c1 = 16, vae_c2 = 32;
        uint64_t model_seed = 777;
    } diffusion;

    struct HiFiNet {
        bool use_text = true;
        std::string condition = "landmarks";  // landmarks|keypoints|none-adapter
        // Output gain on the zero-initialized residual projections. Residuals
        // are still exactly zero at init; the gain compensates for the short
        // desk-scale schedule at the paper's learning rate.
        double residual_gain = 16.0;
    } hifinet;

    struct Training {
        double lr = 2e-5;
        int batch_size = 4;
        double alpha = 0.1;
        double prompt_dropout = 0.1;
        int n_refs_min = 1;
        int n_refs_max = 4;
        int id_loss_interval = 1;
        int max_steps = 2000;
        uint64_t seed = 7;
        int vae_pretrain_steps = 900;
        double vae_pretrain_lr = 2e-3;
        // Optional generic-prior pre-training of the base denoiser (off by
        // default: the frozen base stays at its seeded initialization and the
        // control branch carries the conditional signal).
        int unet_pretrain_steps = 0;
        double unet_pretrain_lr = 1e-3;
    } training;

    struct Selection {
        double lambda = 0.5;
        std::string strategy = "quality-angle";  // target|random|quality|angle|manual|quality-angle
        int manual_index = 0;
    } selection;

    struct Sampler {
        int steps = 8;
        double cfg_scale = 3.0;
        uint64_t seed = 0;
        int n_refs = 4;  // inference-time reference count
    } sampler;

    struct Pipeline {
        int min_size = 256;
        double area_ratio = 0.10;
        int out_size = 1024;
        double quality_threshold = 0.45;
        double sim_threshold = 0.7;
        int kmeans_k = 5;
        int kmeans_restarts = 16;
        uint64_t kmeans_seed = 5;
        int min_group = 5;
        std::string occlusion_keywords = "hand,microphone,mask,sunglasses";
    } pipeline;

    // Parses the sectioned key=value dialect; throws ConfigError on unknown
    // keys, bad values, or malformed lines. Missing keys keep their defaults.
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    // Canonical dump: every key in schema order with normalized formatting.
    // Two configs with equal canonical text behave identically.
    std::string canonical() const;
    std::string to_json() const;
    static Config from_json(const std::string& json_text);

    // FNV-1a over the canonical text; recorded in every output artifact.
    std::string hash() const;
};

}  // namespace portrait
