#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "portrait/config.hpp"
#include "portrait/encoders.hpp"
#include "portrait/image.hpp"
#include "portrait/morphable.hpp"

namespace portrait {

struct RawRecord {
    std::string path;
    std::string source = "fixture";  // vggface2 | imdb | web | fixture
    std::string claimed_id;
};

struct StageFlag {
    std::string stage;
    bool passed = true;
    std::string reason;
};

struct CuratedRecord {
    std::string path;      // source image
    std::string out_path;  // cropped, resized output (set once written)
    std::string identity;
    std::string source = "fixture";
    int bbox_x = 0, bbox_y = 0, bbox_w = 0, bbox_h = 0;  // square face box, source pixels
    double face_area_ratio = 0.0;
    double quality = 0.0;
    std::string caption;
    std::vector<double> embedding;
    std::vector<StageFlag> stage_flags;
    // Carried fixture metadata, used by the statistics report.
    std::string gender;
    int age = 0;

    bool rejected() const {
        for (const auto& f : stage_flags)
            if (!f.passed) return true;
        return false;
    }
    std::string reject_stage() const {
        for (const auto& f : stage_flags)
            if (!f.passed) return f.stage;
        return "";
    }
    std::string reject_reason() const {
        for (const auto& f : stage_flags)
            if (!f.passed) return f.reason;
        return "";
    }

    std::string to_json_line() const;
    static CuratedRecord from_json_line(const std::string& line);
};

struct PipelineOptions {
    int min_size = 256;
    double area_ratio = 0.10;
    int out_size = 1024;
    double quality_threshold = 0.45;
    double sim_threshold = 0.7;
    int kmeans_k = 5;
    int kmeans_restarts = 16;
    uint64_t kmeans_seed = 5;
    int min_group = 5;
    std::vector<std::string> occlusion_keywords = {"hand", "microphone", "mask", "sunglasses"};

    static PipelineOptions from_config(const Config& cfg);
};

// Pluggable stage hooks. Defaults (metadata-aware) are provided by
// default_pipeline_hooks; tests inject their own.
struct PipelineHooks {
    // Face quality in [0, 1].
    std::function<double(const CuratedRecord&, const ImageTensor&)> quality;
    // Watermark predicate (true = watermarked, reject).
    std::function<bool(const CuratedRecord&)> watermark;
    // Facial description text scanned for occlusion keywords.
    std::function<std::string(const CuratedRecord&)> description;
    // Face restoration (identity by default).
    std::function<ImageTensor(const ImageTensor&)> restore;
    // Captioner; may throw CaptionerUnavailable.
    std::function<std::string(const CuratedRecord&)> captioner;
};

PipelineHooks default_pipeline_hooks();

// The exact prompt handed to the captioner backend.
inline constexpr const char* kCaptionPrompt =
    "Dear Yi-Vision, please describe this portrait in detail, focusing on the person's "
    "appearance, hairstyle, clothing, accessories, and background. Please do not describe "
    "facial expressions and poses.";

struct DetectOutcome {
    CuratedRecord record;
    ImageTensor output;          // cropped + resized when passed
    Keypoints2D output_keypoints;  // source keypoints mapped into the crop
    bool has_keypoints = false;
    bool passed = false;
};

// Detection stage: exactly one face, face box > area_ratio of the maximal
// square crop, crop side >= min_size; passed records are cropped to the
// maximal bbox-centered square and resized to out_size.
DetectOutcome stage_detect(const RawRecord& raw, const EncoderBackend& backend,
                           const PipelineOptions& opts);

// Cleansing: quality floor (reject strictly below the threshold), watermark
// predicate, occlusion keywords in the description, then restoration.
bool stage_cleanse(CuratedRecord& rec, ImageTensor& image, const PipelineHooks& hooks,
                   const PipelineOptions& opts);

// Identity verification: seeded k-means++ over the group's embeddings, target
// embedding = centroid of the largest cluster (ties toward the cluster holding
// the lowest index after path-sorting), keep cosine similarity strictly above
// the threshold.
void stage_verify(std::vector<CuratedRecord>& group, const PipelineOptions& opts);

// Captioning; CaptionerUnavailable keeps the record with an empty caption and
// a non-fatal flag.
void stage_caption(CuratedRecord& rec, const PipelineHooks& hooks);

// Deterministic seeded k-means++ with restarts; exposed for the oracle tests.
struct KMeansResult {
    std::vector<int> assignment;
    std::vector<std::vector<double>> centroids;
    double inertia = 0.0;
};
KMeansResult kmeans_cluster(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                            int restarts);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

struct ManifestStats {
    int identities = 0;
    int images = 0;
    double images_per_id_mean = 0.0;
    std::map<std::string, int> images_per_id;
    std::map<int, int> cluster_size_histogram;       // group size -> count
    std::map<int, int> face_area_histogram;          // floor(ratio*10) -> count
    std::map<int, int> age_histogram;                // decade -> count
    std::map<std::string, int> gender_histogram;
    std::string to_json() const;
};

struct Manifest {
    int schema_version = 1;
    std::string config_hash;
    std::vector<CuratedRecord> records;
};

// Drops identity groups smaller than min_group, writes the JSONL manifest
// (header line first) and a statistics JSON next to it.
ManifestStats build_manifest(const std::vector<CuratedRecord>& accepted, const std::string& out_path,
                             const std::string& config_hash, const PipelineOptions& opts);

Manifest load_manifest(const std::string& path);

// Full pipeline over a directory of images (with optional fixture sidecars)
// or an existing manifest. Writes per-stage checkpoint JSONL files into
// out_dir for resumption, cropped outputs (with sidecars) under out_dir/images,
// and the final manifest + stats.
struct PipelineRunReport {
    int input_count = 0;
    int accepted = 0;
    std::map<std::string, int> rejections_by_stage;
    std::string manifest_path;
};

PipelineRunReport run_pipeline(const std::string& input, const std::string& out_dir,
                               const Config& cfg, const EncoderBackend& backend,
                               const PipelineHooks& hooks,
                               const std::vector<std::string>& stages = {"detect", "cleanse",
                                                                         "verify", "caption"});

}  // namespace portrait
