#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "portrait/encoders.hpp"
#include "portrait/image.hpp"
#include "portrait/tensor.hpp"

namespace portrait {

// One rasterized contour: ordered vertex indices plus the palette slot used
// when drawing. Closed curves repeat their first index at the end.
struct ContourLine {
    std::vector<int> indices;
    int color_id = 0;
};

// Fixed palette: jaw, brows, nose, eyes, mouth.
inline constexpr std::array<std::array<double, 3>, 5> kRegionColors = {{
    {1.0, 1.0, 1.0},   // jaw
    {0.0, 1.0, 0.0},   // brows
    {0.0, 0.5, 1.0},   // nose
    {1.0, 1.0, 0.0},   // eyes
    {1.0, 0.0, 0.0},   // mouth
}};

// Linear morphable model: V = mean + id_basis * alpha + exp_basis * beta.
// Basis component slices (K x 3) have unit Frobenius norm and are mutually
// orthonormal in R^(3K).
struct MorphableModel {
    int K = 0, n_id = 0, n_exp = 0;
    Tensor mean_shape;  // K x 3
    Tensor id_basis;    // K x 3 x n_id
    Tensor exp_basis;   // K x 3 x n_exp
    std::vector<ContourLine> topology;
};

struct Pose {
    std::array<double, 3> rotation = {0, 0, 0};  // axis-angle, radians
    double scale = 1.0;
    std::array<double, 2> translation = {0, 0};  // image units
};

struct MorphParams {
    Tensor alpha;  // n_id
    Tensor beta;   // n_exp
    Pose pose;
};

struct Keypoints2D {
    std::vector<std::array<double, 2>> points;
    int size() const { return static_cast<int>(points.size()); }
};

// Axis-angle to rotation matrix (row-major 3x3).
std::array<double, 9> rodrigues(const std::array<double, 3>& axis_angle);

Tensor synth_shape(const MorphableModel& model, const MorphParams& params);  // K x 3
Keypoints2D project_shape(const Tensor& vertices, const Pose& pose);

// Reference identity + target expression and pose.
MorphParams compose_params(const MorphParams& ref, const MorphParams& tgt);

struct FitOptions {
    double mu = 1e-3;      // Tikhonov weight on (alpha, beta)
    double tol = 1e-8;     // parameter-change stopping threshold
    int max_iters = 50;
};

struct FitResult {
    MorphParams params;
    double reproj_rmse = 0.0;
    int iters = 0;
    std::vector<double> rmse_history;  // after each accepted iteration
};

// Alternating fit: scaled-orthographic pose solve against the current shape,
// then ridge least squares for (alpha, beta) with the pose held fixed.
// Accepted updates never increase the reprojection RMSE.
FitResult fit_morphable(const Keypoints2D& keypoints, const MorphableModel& model,
                        const FitOptions& opts = {});

// Deterministic 1-pixel polyline rasterization; out-of-bounds pixels clipped.
ImageTensor render_landmarks(const Keypoints2D& kps, const MorphableModel& model, int height,
                             int width);

// 5-point condition image (eye centers, nose tip, mouth corners) for the
// keypoints ablation; expects the 68-point layout, else uses the first 5.
ImageTensor render_keypoints5(const Keypoints2D& kps, int height, int width);

// Pluggable 2-D keypoint source.
class KeypointExtractor {
public:
    virtual ~KeypointExtractor() = default;
    virtual std::optional<Keypoints2D> extract(const ImageTensor& image) const = 0;
};

// Looks up keypoints registered against exact image content (fixture images
// carry their keypoints in sidecar files; the CLI registers them at load).
class FixtureKeypointExtractor : public KeypointExtractor {
public:
    void register_image(const ImageTensor& image, Keypoints2D kps);
    std::optional<Keypoints2D> extract(const ImageTensor& image) const override;

private:
    std::unordered_map<uint64_t, Keypoints2D> registry_;
};

// Fallback for arbitrary images: detects the face box and places the
// projected mean shape inside it (frontal template).
class DetectorKeypointExtractor : public KeypointExtractor {
public:
    DetectorKeypointExtractor(const EncoderBackend* backend, const MorphableModel* model)
        : backend_(backend), model_(model) {}
    std::optional<Keypoints2D> extract(const ImageTensor& image) const override;

private:
    const EncoderBackend* backend_;
    const MorphableModel* model_;
};

class ChainedKeypointExtractor : public KeypointExtractor {
public:
    void add(const KeypointExtractor* e) { chain_.push_back(e); }
    std::optional<Keypoints2D> extract(const ImageTensor& image) const override {
        for (const KeypointExtractor* e : chain_) {
            auto r = e->extract(image);
            if (r) return r;
        }
        return std::nullopt;
    }

private:
    std::vector<const KeypointExtractor*> chain_;
};

// Full landmark-generator path: fit both images, keep the reference identity,
// adopt the target expression and pose, render at the requested size.
ImageTensor generate_landmark(const ImageTensor& ref_image, const ImageTensor& tgt_image,
                              const MorphableModel& model, const KeypointExtractor& extractor,
                              int height, int width);

// Versioned binary fixture file (magic "HFPM1"): little-endian int32 K, n_id,
// n_exp; float64 mean_shape, id_basis, exp_basis; length-prefixed int32 index
// lists for the topology (color ids assigned by canonical list order).
void save_morphable_model(const std::string& path, const MorphableModel& model);
MorphableModel load_morphable_model(const std::string& path);

// Toy model with the 68-point contour layout and seeded orthonormal bases.
MorphableModel make_toy_morphable_model(int n_id = 8, int n_exp = 6, uint64_t seed = 20240501);

}  // namespace portrait
