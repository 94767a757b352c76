#pragma once

#include <optional>
#include <string>
#include <vector>

#include "portrait/metrics.hpp"
#include "portrait/reference_selector.hpp"
#include "portrait/training.hpp"

namespace portrait {

struct GenerationRequest {
    std::vector<ImageTensor> refs;
    std::vector<Keypoints2D> ref_kps;  // fixture keypoints, aligned with refs when present
    ImageTensor target;
    std::optional<Keypoints2D> target_kps;
    std::string prompt;
    uint64_t seed = 0;
};

struct GenerationResult {
    ImageTensor image;  // pre-quantization pixels in [0, 1]
    SelectionResult selection;
    int n_used = 0;
    std::string sidecar_json;
};

// Full inference path: reference selection, landmark composition, reference
// encoding and refinement, guided DDIM sampling, sidecar assembly.
GenerationResult run_generate(ModelState& model, const GenerationRequest& req);

struct AblateRow {
    std::string value;
    EvalReport report;
    std::string grid_image;  // written strip of the row's samples
};

struct AblateReport {
    std::string axis;
    std::vector<AblateRow> rows;
    std::string config_hash;
    std::string to_json() const;
};

// Ablation harness. Axis is one of fusion_mode | condition_type | n_refs |
// selection_strategy; each row runs generation + evaluation on the eval set
// with that switch applied. Throws UnknownAxis otherwise.
AblateReport run_ablate(ModelState& model, const std::string& axis, const TrainingSet& eval_set,
                        const std::string& out_dir, int samples_per_value = 2);

}  // namespace portrait
