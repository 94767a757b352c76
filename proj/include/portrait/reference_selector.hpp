#pragma once

#include <string>
#include <vector>

#include "portrait/encoders.hpp"
#include "portrait/morphable.hpp"

namespace portrait {

struct FaceScore {
    double quality = 0.0;  // S_q in [0, 1]
    double angle = 0.0;    // S_a in [0, 1]
    double total = 0.0;    // S_q + lambda * S_a
    double lambda = 0.5;
};

// exp(-||rot_ref - rot_tgt||_2) over axis-angle rotations, in radians.
double angle_score(const Pose& ref_pose, const Pose& tgt_pose);

enum class SelectionStrategy { Target, Random, Quality, Angle, Manual, QualityAngle };

SelectionStrategy selection_strategy_from_string(const std::string& s);
std::string selection_strategy_to_string(SelectionStrategy s);

struct SelectionResult {
    int index = 0;                 // -1 for the `target` strategy
    std::vector<FaceScore> scores;
    std::string strategy;
};

// Scores every reference against the target and picks the landmark source.
// Ties break toward the lowest index. `rng_seed` drives the random strategy.
SelectionResult select_reference(const std::vector<ImageTensor>& refs, const ImageTensor& target,
                                 const EncoderBackend& backend, const MorphableModel& model,
                                 const KeypointExtractor& extractor, double lambda,
                                 SelectionStrategy strategy = SelectionStrategy::QualityAngle,
                                 int manual_index = 0, uint64_t rng_seed = 0);

// Core of Eq-9-style selection exposed for oracle tests: argmax of
// quality + lambda * angle with lowest-index tie break.
int argmax_score(const std::vector<double>& quality, const std::vector<double>& angle,
                 double lambda);

}  // namespace portrait
