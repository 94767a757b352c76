#include "portrait/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"

namespace portrait {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {
double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
}
}  // namespace

double metric_sim_f(const ImageTensor& generated, const std::vector<ImageTensor>& refs,
                    const FeatureFn& embedder) {
    if (refs.empty()) raise(ErrorCode::InsufficientSamples, "sim_f: no references");
    std::vector<double> g = embedder(generated);
    double acc = 0.0;
    for (const ImageTensor& r : refs) acc += cos_sim(g, embedder(r));
    return acc / static_cast<double>(refs.size());
}

std::pair<double, double> metric_exp_pose_rmse(const ImageTensor& generated,
                                               const ImageTensor& target,
                                               const MorphableModel& model,
                                               const KeypointExtractor& extractor,
                                               const FitOptions& fit_opts) {
    auto g_kps = extractor.extract(generated);
    if (!g_kps) raise(ErrorCode::DegenerateInput, "exp_pose_rmse: no keypoints on generated image");
    auto t_kps = extractor.extract(target);
    if (!t_kps) raise(ErrorCode::DegenerateInput, "exp_pose_rmse: no keypoints on target image");
    MorphParams g_params = fit_morphable(*g_kps, model, fit_opts).params;
    MorphParams t_params = fit_morphable(*t_kps, model, fit_opts).params;

    double exp_acc = 0.0;
    for (int i = 0; i < model.n_exp; ++i) {
        double d = g_params.beta.data[i] - t_params.beta.data[i];
        exp_acc += d * d;
    }
    double exp_rmse = std::sqrt(exp_acc / model.n_exp);

    double pose_acc = 0.0;
    for (int i = 0; i < 3; ++i) {
        double d = g_params.pose.rotation[i] - t_params.pose.rotation[i];
        pose_acc += d * d;
    }
    double pose_rmse = std::sqrt(pose_acc / 3.0);
    return {exp_rmse, pose_rmse};
}

double metric_toy_fid(const std::vector<ImageTensor>& set_a, const std::vector<ImageTensor>& set_b,
                      const FeatureFn& feature_fn) {
    if (set_a.size() < 2 || set_b.size() < 2)
        raise(ErrorCode::InsufficientSamples, "toy_fid: each set needs at least 2 images");
    auto moments = [&](const std::vector<ImageTensor>& set, Eigen::VectorXd& mu,
                       Eigen::MatrixXd& sigma) {
        std::vector<std::vector<double>> feats;
        for (const auto& img : set) feats.push_back(feature_fn(img));
        int n = static_cast<int>(feats.size());
        int d = static_cast<int>(feats[0].size());
        mu = Eigen::VectorXd::Zero(d);
        for (const auto& f : feats)
            for (int i = 0; i < d; ++i) mu(i) += f[static_cast<size_t>(i)];
        mu /= n;
        sigma = Eigen::MatrixXd::Zero(d, d);
        for (const auto& f : feats) {
            Eigen::VectorXd v(d);
            for (int i = 0; i < d; ++i) v(i) = f[static_cast<size_t>(i)];
            v -= mu;
            sigma += v * v.transpose();
        }
        sigma /= (n - 1);
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd sig_a, sig_b;
    moments(set_a, mu_a, sig_a);
    moments(set_b, mu_b, sig_b);

    // tr((Sa Sb)^(1/2)) = sum of sqrt eigenvalues of sqrt(Sa) Sb sqrt(Sa).
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(sig_a);
    Eigen::VectorXd ev = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd sqrt_a = es_a.eigenvectors() * ev.asDiagonal() * es_a.eigenvectors().transpose();
    Eigen::MatrixXd m = sqrt_a * sig_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m((m + m.transpose()) / 2.0);
    double tr_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mean_term = (mu_a - mu_b).squaredNorm();
    return mean_term + sig_a.trace() + sig_b.trace() - 2.0 * tr_sqrt;
}

std::string EvalReport::to_json() const {
    json j;
    j["note"] = note;
    j["config_hash"] = config_hash;
    j["sim_f"] = sim_f;
    j["clip_f"] = clip_f;
    j["exp_rmse"] = exp_rmse;
    j["pose_rmse"] = pose_rmse;
    j["toy_fid"] = toy_fid;
    json rows = json::array();
    for (const auto& s : per_sample)
        rows.push_back({{"name", s.name},
                        {"sim_f", s.sim_f},
                        {"clip_f", s.clip_f},
                        {"exp_rmse", s.exp_rmse},
                        {"pose_rmse", s.pose_rmse}});
    j["per_sample"] = rows;
    return j.dump(2);
}

namespace {
// Face-crop embedding when a face is detectable, whole image otherwise, so
// early toy samples still evaluate.
std::vector<double> lenient_global_embed(const ImageTensor& img, const ToyBackend& backend) {
    std::vector<FaceCrop> crops = backend.detect(img);
    const ImageTensor& src = crops.empty() ? img : crops.front().image;
    Tensor e = backend.embed_global(src);
    return std::vector<double>(e.data.begin(), e.data.end());
}

std::vector<double> lenient_cls_embed(const ImageTensor& img, const ToyBackend& backend) {
    std::vector<FaceCrop> crops = backend.detect(img);
    const ImageTensor& src = crops.empty() ? img : crops.front().image;
    Tensor e = backend.embed_cls(src);
    return std::vector<double>(e.data.begin(), e.data.end());
}

std::vector<ImageTensor> load_dir(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".png") paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    std::vector<ImageTensor> out;
    for (const auto& p : paths) out.push_back(read_png(p));
    if (out.empty()) raise(ErrorCode::InsufficientSamples, "no PNG images in " + dir);
    return out;
}
}  // namespace

EvalReport evaluate_images(const std::vector<ImageTensor>& generated,
                           const std::vector<ImageTensor>& refs,
                           const std::vector<ImageTensor>& targets, ModelState& model,
                           const KeypointExtractor& extractor) {
    if (generated.empty() || refs.empty())
        raise(ErrorCode::InsufficientSamples, "evaluate: need generated and reference images");
    EvalReport report;
    report.config_hash = model.cfg.hash();
    FeatureFn id_embed = [&](const ImageTensor& img) {
        return lenient_global_embed(img, model.backend);
    };
    FeatureFn clip_embed = [&](const ImageTensor& img) {
        return lenient_cls_embed(img, model.backend);
    };

    int exp_count = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        EvalSample s;
        s.name = "sample_" + std::to_string(i);
        s.sim_f = metric_sim_f(generated[i], refs, id_embed);
        s.clip_f = metric_sim_f(generated[i], refs, clip_embed);
        report.sim_f += s.sim_f;
        report.clip_f += s.clip_f;
        if (!targets.empty()) {
            try {
                auto [e, p] = metric_exp_pose_rmse(generated[i], targets[i % targets.size()],
                                                   model.morph, extractor);
                s.exp_rmse = e;
                s.pose_rmse = p;
                report.exp_rmse += e;
                report.pose_rmse += p;
                exp_count++;
            } catch (const Error&) {
                s.exp_rmse = -1.0;  // face not fittable on this sample
                s.pose_rmse = -1.0;
            }
        }
        report.per_sample.push_back(std::move(s));
    }
    report.sim_f /= static_cast<double>(generated.size());
    report.clip_f /= static_cast<double>(generated.size());
    if (exp_count > 0) {
        report.exp_rmse /= exp_count;
        report.pose_rmse /= exp_count;
    }
    if (generated.size() >= 2 && refs.size() >= 2)
        report.toy_fid = metric_toy_fid(generated, refs, id_embed);
    return report;
}

EvalReport evaluate_directories(const std::string& generated_dir, const std::string& refs_dir,
                                const std::string& targets_dir, ModelState& model) {
    std::vector<ImageTensor> generated = load_dir(generated_dir);
    std::vector<ImageTensor> refs = load_dir(refs_dir);
    std::vector<ImageTensor> targets;
    FixtureKeypointExtractor fixture_kps;
    if (!targets_dir.empty()) {
        std::vector<std::string> paths;
        for (const auto& entry : fs::directory_iterator(targets_dir))
            if (entry.path().extension() == ".png") paths.push_back(entry.path().string());
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) {
            targets.push_back(read_png(p));
            auto kps = read_fixture_keypoints(p);
            if (kps) fixture_kps.register_image(targets.back(), *kps);
        }
    }
    DetectorKeypointExtractor detector_kps(&model.backend, &model.morph);
    ChainedKeypointExtractor chain;
    chain.add(&fixture_kps);
    chain.add(&detector_kps);
    return evaluate_images(generated, refs, targets, model, chain);
}

}  // namespace portrait
