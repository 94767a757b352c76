#include "portrait/reference_selector.hpp"

#include <cmath>

#include "portrait/errors.hpp"
#include "portrait/rng.hpp"

namespace portrait {

double angle_score(const Pose& ref_pose, const Pose& tgt_pose) {
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
        double d = ref_pose.rotation[i] - tgt_pose.rotation[i];
        acc += d * d;
    }
    return std::exp(-std::sqrt(acc));
}

SelectionStrategy selection_strategy_from_string(const std::string& s) {
    if (s == "target") return SelectionStrategy::Target;
    if (s == "random") return SelectionStrategy::Random;
    if (s == "quality") return SelectionStrategy::Quality;
    if (s == "angle") return SelectionStrategy::Angle;
    if (s == "manual") return SelectionStrategy::Manual;
    if (s == "quality-angle" || s == "quality&angle") return SelectionStrategy::QualityAngle;
    raise(ErrorCode::ConfigError, "unknown selection strategy: " + s);
}

std::string selection_strategy_to_string(SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::Target: return "target";
        case SelectionStrategy::Random: return "random";
        case SelectionStrategy::Quality: return "quality";
        case SelectionStrategy::Angle: return "angle";
        case SelectionStrategy::Manual: return "manual";
        case SelectionStrategy::QualityAngle: return "quality-angle";
    }
    return "?";
}

int argmax_score(const std::vector<double>& quality, const std::vector<double>& angle,
                 double lambda) {
    int best = 0;
    double best_total = quality[0] + lambda * angle[0];
    for (size_t i = 1; i < quality.size(); ++i) {
        double total = quality[i] + lambda * angle[i];
        if (total > best_total) {
            best_total = total;
            best = static_cast<int>(i);
        }
    }
    return best;
}

SelectionResult select_reference(const std::vector<ImageTensor>& refs, const ImageTensor& target,
                                 const EncoderBackend& backend, const MorphableModel& model,
                                 const KeypointExtractor& extractor, double lambda,
                                 SelectionStrategy strategy, int manual_index, uint64_t rng_seed) {
    if (refs.empty()) raise(ErrorCode::NoFaceFound, "select_reference: no references");
    auto tgt_kps = extractor.extract(target);
    if (!tgt_kps) raise(ErrorCode::NoFaceFound, "select_reference: target face not found");
    Pose tgt_pose = fit_morphable(*tgt_kps, model).params.pose;

    SelectionResult out;
    out.strategy = selection_strategy_to_string(strategy);
    std::vector<double> quality, angle;
    for (size_t i = 0; i < refs.size(); ++i) {
        auto kps = extractor.extract(refs[i]);
        if (!kps)
            raise(ErrorCode::NoFaceFound, "select_reference: reference " + std::to_string(i),
                  static_cast<int>(i));
        FaceScore score;
        score.lambda = lambda;
        score.quality = backend.quality(refs[i]);
        score.angle = angle_score(fit_morphable(*kps, model).params.pose, tgt_pose);
        score.total = score.quality + lambda * score.angle;
        quality.push_back(score.quality);
        angle.push_back(score.angle);
        out.scores.push_back(score);
    }

    switch (strategy) {
        case SelectionStrategy::Target:
            out.index = -1;  // the landmark generator uses the target itself
            break;
        case SelectionStrategy::Random: {
            Rng rng(rng_seed);
            out.index = static_cast<int>(rng.uniform_int(refs.size()));
            break;
        }
        case SelectionStrategy::Quality:
            out.index = argmax_score(quality, std::vector<double>(quality.size(), 0.0), 0.0);
            break;
        case SelectionStrategy::Angle:
            out.index = argmax_score(angle, std::vector<double>(angle.size(), 0.0), 0.0);
            break;
        case SelectionStrategy::Manual:
            if (manual_index < 0 || manual_index >= static_cast<int>(refs.size()))
                raise(ErrorCode::IndexOutOfRange, "manual selection index out of range");
            out.index = manual_index;
            break;
        case SelectionStrategy::QualityAngle:
            out.index = argmax_score(quality, angle, lambda);
            break;
    }
    return out;
}

}  // namespace portrait
