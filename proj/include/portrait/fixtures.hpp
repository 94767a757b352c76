#pragma once

#include <optional>
#include <string>
#include <vector>

#include "portrait/image.hpp"
#include "portrait/morphable.hpp"
#include "portrait/rng.hpp"

namespace portrait {

// Deterministic per-identity rendering style. Hues are spread with the golden
// ratio so identities land far apart in the toy embedding space.
struct IdentityStyle {
    std::array<double, 3> skin = {0.8, 0.7, 0.6};
    std::array<double, 3> background = {0.05, 0.06, 0.1};
    std::array<double, 3> lips = {0.55, 0.15, 0.15};
    std::string hair_name = "brown";
    std::string background_name = "studio";
    std::string gender = "unknown";
    int age = 30;
};

IdentityStyle identity_style(uint64_t id_seed);

struct FixtureFace {
    ImageTensor image;
    Keypoints2D keypoints;
    MorphParams params;
};

// Identity coefficients are a deterministic function of the identity seed;
// expression and pose are drawn from `rng`. `face_frac` controls how much of
// the image the face spans.
MorphParams sample_face_params(const MorphableModel& model, uint64_t id_seed, Rng& rng,
                               int image_size, double face_frac = 0.6);

// Draws a synthetic face: dark background, bright convex face region, dark
// features along the landmark contours. The blob detector and the fixture
// keypoint registry both work off this rendering.
FixtureFace render_fixture_face(const MorphableModel& model, const MorphParams& params,
                                const IdentityStyle& style, int height, int width);

// Convenience: one identity, `count` images with varied expression and pose.
std::vector<FixtureFace> make_identity_group(const MorphableModel& model, uint64_t id_seed,
                                             int count, int image_size, uint64_t variation_seed,
                                             double face_frac = 0.6);

// Sidecar metadata stored next to fixture PNGs (<stem>.meta.json and
// <stem>.kps.json).
struct FixtureMeta {
    std::string claimed_id;
    std::string source = "fixture";
    std::string description;  // facial description used by the occlusion filter
    bool watermark = false;
    std::optional<double> quality_override;
    std::string hair_name, background_name, gender;
    int age = 0;
};

void write_fixture_files(const std::string& dir, const std::string& stem, const FixtureFace& face,
                         const FixtureMeta& meta);
std::optional<FixtureMeta> read_fixture_meta(const std::string& png_path);
std::optional<Keypoints2D> read_fixture_keypoints(const std::string& png_path);

// The 30-image corpus with planted violations used by the pipeline tests:
// one two-face image, one undersized-face image (area ratio < 0.10), one
// sub-256px image, one quality override at 0.449, one "holding a microphone"
// description, and one identity outlier inside a claimed group.
struct CorpusPlan {
    std::string dir;
    int identities = 4;
    int images_per_identity = 6;
    int image_size = 400;
    uint64_t seed = 99;
};

struct PlantedViolations {
    std::string two_faces, small_area, small_image, low_quality, occluded, outlier;
};

PlantedViolations make_pipeline_corpus(const CorpusPlan& plan);

// Writes one identity group (PNG + sidecars) for training / generation demos.
std::vector<std::string> write_identity_group(const std::string& dir, const MorphableModel& model,
                                              uint64_t id_seed, int count, int image_size,
                                              uint64_t variation_seed);

}  // namespace portrait
