#pragma once

#include <functional>
#include <string>
#include <vector>

#include "portrait/config.hpp"
#include "portrait/diffusion.hpp"
#include "portrait/encoders.hpp"
#include "portrait/face_refiner.hpp"
#include "portrait/hifi_net.hpp"
#include "portrait/morphable.hpp"

namespace portrait {

// Everything the system holds in memory: frozen VAE / U-Net / encoders plus
// the trainable refiner and control path, all derived deterministically from
// the config seeds.
struct ModelState {
    Config cfg;
    ToyBackend backend;
    MorphableModel morph;
    NoiseSchedule schedule;
    VaeParams vae;
    UNetParams unet;
    RefinerParams refiner;
    HiFiNetParams hifinet;
    AdapterParams adapter;
    FusionMode fusion = FusionMode::FaceRefiner;

    static ModelState build(const Config& cfg);

    // Refiner plus the active control path (HiFi-Net, or the adapter when
    // condition = none-adapter).
    std::vector<ParamTensor*> trainable_params();
    // VAE and base U-Net; never updated by training.
    std::vector<ParamTensor*> frozen_params();
    void apply_trainability();
};

struct TrainSample {
    ImageTensor target;
    std::vector<ImageTensor> references;  // same identity, target excluded
    std::string caption;
    ImageTensor landmark;  // precomputed condition image (reference ID + target pose)
};

struct TrainState {
    int64_t step = 0;
    Rng rng{0};
    uint32_t frozen_crc = 0;
};

struct LossReport {
    double l_sd = 0.0;
    double l_id = 0.0;
    double l_total = 0.0;
    int gated_on = 0;     // samples whose detector gate was 1
    int dropped = 0;      // samples trained on the joint unconditional branch
    bool id_applied = false;
};

// L2 norm of the residual for one sample; batches average these.
double loss_sd(const Tensor& eps, const Tensor& eps_hat);
V loss_sd_graph(Graph& g, const Tensor& eps, V eps_hat);

using DetectorFn = std::function<int(const ImageTensor&)>;
using EmbedFn = std::function<Tensor(const ImageTensor&)>;

// Eq-style detection-gated identity loss: gate * (1 - cos(f_id, embed(x0_hat))).
// The detector returns exactly 0 or 1.
double loss_id(const ImageTensor& x0_hat, const Tensor& f_id, const DetectorFn& detector,
               const EmbedFn& embedder);

double total_loss(double l_sd, double l_id, double alpha);

// The training loop's prompt-dropout decision (kept separate so its frequency
// is testable against the configured probability).
bool drop_prompt(Rng& rng, double p);

void init_train_state(ModelState& model, TrainState& state, uint64_t seed);

// Per-sample loss graph shared by train_step and the gradient checks.
// When `dropped` is set the sample trains the joint unconditional branch
// (null text, zeroed control path). `gate` is the detector output for the
// identity term; pass 0 to skip it entirely.
struct SampleLoss {
    V l_sd{};
    V l_id{};        // valid only when gate == 1 and apply_id
    int gate = 0;
    bool has_id = false;
};

SampleLoss build_sample_loss_graph(Graph& g, ModelState& model, const TrainSample& sample,
                                   int t, const Tensor& eps, const TextEmbedding& text,
                                   bool dropped, bool apply_id, const DetectorFn& detector);

// One optimizer step over a batch. Only refiner + control-path parameters
// move; the VAE, U-Net and encoders stay frozen.
LossReport train_step(ModelState& model, TrainState& state,
                      const std::vector<TrainSample>& batch,
                      const DetectorFn* detector_override = nullptr);

uint32_t frozen_checksum(ModelState& model);
// Throws FrozenParameterMutation if any frozen tensor changed since init.
void assert_frozen(ModelState& model, const TrainState& state);

// Condition image for the configured condition type. `landmarks` renders the
// full contour set, `keypoints` the 5-point variant, `none-adapter` a black
// image (the adapter path ignores it).
ImageTensor make_condition_image(const ImageTensor& ref_image, const ImageTensor& tgt_image,
                                 const MorphableModel& model, const KeypointExtractor& extractor,
                                 int size, const std::string& condition);

// In-memory training corpus: one identity group (or several), with fixture
// keypoints registered for the landmark generator.
struct TrainingSet {
    std::vector<ImageTensor> images;
    std::vector<std::string> captions;
    std::vector<std::string> identities;
    FixtureKeypointExtractor extractor;

    void add(const ImageTensor& image, const Keypoints2D& kps, const std::string& caption,
             const std::string& identity);
    // Loads PNGs plus .kps.json/.meta.json sidecars from a directory.
    static TrainingSet from_directory(const std::string& dir);
};

TrainSample make_train_sample(const TrainingSet& set, ModelState& model, Rng& rng);
std::vector<TrainSample> make_batch(const TrainingSet& set, ModelState& model, Rng& rng,
                                    int batch_size);

}  // namespace portrait
