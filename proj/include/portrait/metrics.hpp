#pragma once

#include <functional>
#include <string>
#include <vector>

#include "portrait/image.hpp"
#include "portrait/morphable.hpp"
#include "portrait/training.hpp"

namespace portrait {

using FeatureFn = std::function<std::vector<double>(const ImageTensor&)>;

// Mean cosine similarity between the generated face's embedding and each
// reference embedding.
double metric_sim_f(const ImageTensor& generated, const std::vector<ImageTensor>& refs,
                    const FeatureFn& embedder);

// Expression / pose RMSE between fitted coefficient vectors. Expression is
// the RMSE over beta; pose the RMSE over the three rotation components.
std::pair<double, double> metric_exp_pose_rmse(const ImageTensor& generated,
                                               const ImageTensor& target,
                                               const MorphableModel& model,
                                               const KeypointExtractor& extractor,
                                               const FitOptions& fit_opts = {});

// Frechet distance between Gaussian fits of the two feature sets:
// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)). Each set needs >= 2
// images (InsufficientSamples otherwise).
double metric_toy_fid(const std::vector<ImageTensor>& set_a, const std::vector<ImageTensor>& set_b,
                      const FeatureFn& feature_fn);

struct EvalSample {
    std::string name;
    double sim_f = 0.0, clip_f = 0.0, exp_rmse = 0.0, pose_rmse = 0.0;
};

struct EvalReport {
    // Scores come from the toy training encoders: they order systems built in
    // this codebase but are not comparable to published absolute numbers.
    std::string note =
        "scores use the toy evaluation encoders; values are relative, not comparable to "
        "published absolutes";
    std::string config_hash;
    double sim_f = 0.0, clip_f = 0.0, exp_rmse = 0.0, pose_rmse = 0.0, toy_fid = 0.0;
    std::vector<EvalSample> per_sample;
    std::string to_json() const;
};

// Directory-level harness used by the evaluate / ablate CLI commands.
// Generated and target files pair up in sorted order.
EvalReport evaluate_directories(const std::string& generated_dir, const std::string& refs_dir,
                                const std::string& targets_dir, ModelState& model);

EvalReport evaluate_images(const std::vector<ImageTensor>& generated,
                           const std::vector<ImageTensor>& refs,
                           const std::vector<ImageTensor>& targets, ModelState& model,
                           const KeypointExtractor& extractor);

}  // namespace portrait
