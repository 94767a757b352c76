// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code 0 iff all pass.
//
// The overfit-trend criterion trains the desk-scale model for 2,000 steps and
// leaves its checkpoint + fixture set in the workspace for the criteria that
// follow it (multi-reference trend, permutation invariance, CLI determinism,
// ablation harness).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "portrait/checkpoint.hpp"
#include "portrait/dataset_pipeline.hpp"
#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"
#include "portrait/generate.hpp"
#include "portrait/metrics.hpp"
#include "portrait/training.hpp"

#ifndef PORTRAITGEN_BIN
#define PORTRAITGEN_BIN "portraitgen"
#endif

using namespace portrait;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;
std::string g_work = "acceptance_work";

void report(int idx, const std::string& name, bool pass, const std::string& detail = "") {
    std::printf("[%2d] %-52s %s%s%s\n", idx, name.c_str(), pass ? "PASS" : "FAIL",
                detail.empty() ? "" : "  -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) g_failures++;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Zero-init equivalence
// ---------------------------------------------------------------------------
void criterion_1() {
    auto t0 = std::chrono::steady_clock::now();
    Config cfg;  // desk defaults
    Rng rng(cfg.diffusion.model_seed + 1);
    UNetParams unet(cfg.diffusion.unet_c0, cfg.diffusion.unet_c1, cfg.diffusion.unet_c2,
                    cfg.model.d_text, cfg.diffusion.time_dim, cfg.diffusion.heads, rng);
    Rng hrng(cfg.diffusion.model_seed + 2);
    HiFiNetParams hifinet(unet, cfg.model.d, true, hrng);

    Rng in_rng(424242);
    double max_diff = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = Tensor::randn({4, 8, 8}, in_rng);
        Tensor lmk = Tensor::randn({4, 8, 8}, in_rng);
        Tensor tokens = Tensor::randn({static_cast<int>(1 + in_rng.uniform_int(4)) * 33, cfg.model.d},
                                      in_rng);
        TextEmbedding text;
        text.tokens = Tensor::randn({cfg.model.t_text, cfg.model.d_text}, in_rng, 0.3);
        int t = static_cast<int>(in_rng.uniform_int(1000));

        Tensor base = denoise(z, t, text, nullptr, unet);
        ControlResidualValues res = hifinet_forward_values(z, t, lmk, tokens, &text, hifinet);
        Tensor cond = denoise(z, t, text, &res, unet);
        for (size_t i = 0; i < base.data.size(); ++i)
            max_diff = std::max(max_diff, std::fabs(cond.data[i] - base.data[i]));
    }
    char detail[128];
    std::snprintf(detail, sizeof detail, "max abs diff %.3g over 20 inputs, %.1fs", max_diff,
                  elapsed_s(t0));
    report(1, "zero-init equivalence (conditioned == base)", max_diff == 0.0, detail);
}

// ---------------------------------------------------------------------------
// 2. Gradient suite
// ---------------------------------------------------------------------------
struct GroupResult {
    int checked = 0, passed = 0;
    double worst = 0.0;
};

GroupResult check_param_group(std::vector<ParamTensor*>& params,
                              const std::function<double()>& loss_value, int coords, Rng& rng,
                              double h, double rel_tol) {
    GroupResult res;
    int64_t total = 0;
    for (ParamTensor* p : params) total += p->value.numel();
    for (int c = 0; c < coords; ++c) {
        int64_t pick = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(total)));
        ParamTensor* target = nullptr;
        for (ParamTensor* p : params) {
            if (pick < p->value.numel()) {
                target = p;
                break;
            }
            pick -= p->value.numel();
        }
        double orig = target->value.data[static_cast<size_t>(pick)];
        double step = h * std::max(1.0, std::fabs(orig));
        target->value.data[static_cast<size_t>(pick)] = orig + step;
        double lp = loss_value();
        target->value.data[static_cast<size_t>(pick)] = orig - step;
        double lm = loss_value();
        target->value.data[static_cast<size_t>(pick)] = orig;
        double fd = (lp - lm) / (2.0 * step);
        double an = target->grad.data[static_cast<size_t>(pick)];
        double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
        double rel = std::fabs(fd - an) <= 1e-8 ? 0.0 : std::fabs(fd - an) / denom;
        res.checked++;
        if (rel < rel_tol) res.passed++;
        res.worst = std::max(res.worst, rel);
    }
    return res;
}

Config toy_grad_config() {
    Config cfg;
    cfg.model.d = 8;
    cfg.model.refiner_layers = 2;
    cfg.model.refiner_heads = 2;
    cfg.model.t_local = 5;
    cfg.model.d1 = 3;
    cfg.model.d2 = 4;
    cfg.model.d_text = 6;
    cfg.model.t_text = 3;
    cfg.diffusion.image_size = 64;  // 8x8 latents
    cfg.diffusion.unet_c0 = 4;
    cfg.diffusion.unet_c1 = 4;
    cfg.diffusion.unet_c2 = 8;
    cfg.diffusion.time_dim = 16;
    cfg.diffusion.vae_c0 = 4;
    cfg.diffusion.vae_c1 = 8;
    cfg.diffusion.vae_c2 = 8;
    return cfg;
}

void criterion_2() {
    auto t0 = std::chrono::steady_clock::now();
    const int kCoords = 100;
    const double kTol = 1e-4;
    const double kMinRate = 0.95;
    bool all_pass = true;
    std::string detail;

    // Group A: face refiner alone.
    {
        Rng rng(5);
        RefinerParams refiner(3, 4, 8, 2, 2, rng);
        // FD conditioning: check at a generic parameter point (the 0.02-std
        // token init is too small for stable central differences).
        Rng trng(6);
        refiner.learn_tokens.value =
            Tensor::randn({RefinerParams::kLearnableTokens, 8}, trng, 0.3);
        LocalFeatures local;
        local.n = 2;
        local.t_local = 5;
        local.d1 = 3;
        local.tokens = Tensor::randn({2, 5, 3}, trng);
        GlobalFeatures global;
        global.n = 2;
        global.d2 = 4;
        global.embedding = Tensor::randn({2, 1, 4}, trng);

        auto loss = [&]() {
            Graph g;
            auto refs = refine_graph(g, local, global, refiner);
            V total = g.sumsq(refs[0]);
            for (size_t r = 1; r < refs.size(); ++r) total = g.add(total, g.sumsq(refs[r]));
            return g.val(g.scale(total, 0.1)).data[0];
        };
        std::vector<ParamTensor*> params;
        refiner.collect(params);
        zero_gradients(params);
        {
            Graph g;
            auto refs = refine_graph(g, local, global, refiner);
            V total = g.sumsq(refs[0]);
            for (size_t r = 1; r < refs.size(); ++r) total = g.add(total, g.sumsq(refs[r]));
            g.backward(g.scale(total, 0.1));
        }
        Rng crng(7);
        GroupResult r = check_param_group(params, loss, kCoords, crng, 1e-5, kTol);
        bool ok = r.passed >= static_cast<int>(std::ceil(kMinRate * r.checked));
        all_pass = all_pass && ok;
        detail += "refiner " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + " ";
    }

    // Group B: HiFi-Net through the injected denoiser.
    {
        Rng rng(8);
        UNetParams unet(4, 4, 8, 6, 16, 2, rng);
        Rng hrng(9);
        HiFiNetParams hifinet(unet, 8, true, hrng);
        Rng zrng(10);
        for (ParamTensor* p : {&hifinet.zero0.w, &hifinet.zero1.w, &hifinet.zero2.w,
                               &hifinet.zero_mid.w, &hifinet.adapter2.w})
            p->value = Tensor::randn(p->value.shape, zrng, 0.2);
        Tensor z = Tensor::randn({4, 8, 8}, zrng);
        Tensor lmk = Tensor::randn({4, 8, 8}, zrng);
        Tensor tokens = Tensor::randn({66, 8}, zrng);
        TextEmbedding text;
        text.tokens = Tensor::randn({3, 6}, zrng, 0.3);

        auto loss = [&]() {
            Graph g;
            ControlResiduals res = hifinet_forward(g, g.input(z), 71, g.input(lmk),
                                                   g.input(tokens), &text, hifinet);
            V eps = denoise_graph(g, g.input(z), 71, text, &res, unet);
            return g.val(g.scale(g.sumsq(eps), 0.1)).data[0];
        };
        std::vector<ParamTensor*> params;
        hifinet.collect(params);
        zero_gradients(params);
        {
            Graph g;
            ControlResiduals res = hifinet_forward(g, g.input(z), 71, g.input(lmk),
                                                   g.input(tokens), &text, hifinet);
            V eps = denoise_graph(g, g.input(z), 71, text, &res, unet);
            g.backward(g.scale(g.sumsq(eps), 0.1));
        }
        Rng crng(11);
        GroupResult r = check_param_group(params, loss, kCoords, crng, 1e-5, kTol);
        bool ok = r.passed >= static_cast<int>(std::ceil(kMinRate * r.checked));
        all_pass = all_pass && ok;
        detail += "hifinet " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + " ";
    }

    // Group C+D: refiner and HiFi-Net through the full training loss
    // (l_sd + alpha * l_id with the detector gate held at 1).
    {
        Config cfg = toy_grad_config();
        ModelState model = ModelState::build(cfg);
        Rng trng(12);
        model.refiner.learn_tokens.value =
            Tensor::randn({RefinerParams::kLearnableTokens, cfg.model.d}, trng, 0.3);
        for (ParamTensor* p : {&model.hifinet.zero0.w, &model.hifinet.zero1.w,
                               &model.hifinet.zero2.w, &model.hifinet.zero_mid.w,
                               &model.hifinet.adapter2.w})
            p->value = Tensor::randn(p->value.shape, trng, 0.2);

        auto faces = make_identity_group(model.morph, 4321, 3, 64, 55);
        TrainingSet set;
        for (auto& f : faces) set.add(f.image, f.keypoints, "a portrait", "id");
        Rng srng(13);
        TrainSample sample = make_train_sample(set, model, srng);
        const int t = 700;
        Tensor eps = Tensor::randn({4, 8, 8}, srng);
        TextEmbedding text = model.backend.encode_text(sample.caption);
        DetectorFn always_on = [](const ImageTensor&) { return 1; };

        auto loss = [&]() {
            Graph g;
            SampleLoss sl = build_sample_loss_graph(g, model, sample, t, eps, text, false, true,
                                                    always_on);
            V total = sl.has_id ? g.add(sl.l_sd, g.scale(sl.l_id, cfg.training.alpha)) : sl.l_sd;
            return g.val(total).data[0];
        };
        auto backprop = [&]() {
            Graph g;
            SampleLoss sl = build_sample_loss_graph(g, model, sample, t, eps, text, false, true,
                                                    always_on);
            V total = sl.has_id ? g.add(sl.l_sd, g.scale(sl.l_id, cfg.training.alpha)) : sl.l_sd;
            g.backward(total);
        };

        std::vector<ParamTensor*> refiner_params;
        model.refiner.collect(refiner_params);
        zero_gradients(refiner_params);
        std::vector<ParamTensor*> hifinet_params;
        model.hifinet.collect(hifinet_params);
        zero_gradients(hifinet_params);
        backprop();

        Rng crng(14);
        GroupResult rr = check_param_group(refiner_params, loss, kCoords, crng, 1e-5, kTol);
        bool ok_r = rr.passed >= static_cast<int>(std::ceil(kMinRate * rr.checked));
        GroupResult rh = check_param_group(hifinet_params, loss, kCoords, crng, 1e-5, kTol);
        bool ok_h = rh.passed >= static_cast<int>(std::ceil(kMinRate * rh.checked));
        all_pass = all_pass && ok_r && ok_h;
        detail += "full-loss refiner " + std::to_string(rr.passed) + "/" +
                  std::to_string(rr.checked) + ", hifinet " + std::to_string(rh.passed) + "/" +
                  std::to_string(rh.checked);
    }

    char timing[64];
    std::snprintf(timing, sizeof timing, " (%.0fs)", elapsed_s(t0));
    report(2, "gradient suite vs finite differences", all_pass, detail + timing);
}

// ---------------------------------------------------------------------------
// 3. 3DMM round trip
// ---------------------------------------------------------------------------
void criterion_3() {
    auto t0 = std::chrono::steady_clock::now();
    MorphableModel model = make_toy_morphable_model();
    Rng rng(31415);
    auto sample_params = [&]() {
        MorphParams p;
        p.alpha = Tensor::randn({model.n_id}, rng, 0.3);
        p.beta = Tensor::randn({model.n_exp}, rng, 0.3);
        p.pose.rotation = {rng.normal(0.0, 0.1), rng.normal(0.0, 0.15), rng.normal(0.0, 0.1)};
        p.pose.scale = 300.0 * (1.0 + 0.1 * rng.normal());
        p.pose.translation = {512.0 + rng.normal(0.0, 20.0), 512.0 + rng.normal(0.0, 20.0)};
        return p;
    };
    auto params_rmse = [&](const MorphParams& a, const MorphParams& b) {
        double acc = 0.0;
        int n = 0;
        for (int i = 0; i < a.alpha.numel(); ++i, ++n) {
            double d = a.alpha.data[i] - b.alpha.data[i];
            acc += d * d;
        }
        for (int i = 0; i < a.beta.numel(); ++i, ++n) {
            double d = a.beta.data[i] - b.beta.data[i];
            acc += d * d;
        }
        for (int i = 0; i < 3; ++i, ++n) {
            double d = a.pose.rotation[i] - b.pose.rotation[i];
            acc += d * d;
        }
        acc += std::pow((a.pose.scale - b.pose.scale) / b.pose.scale, 2.0);
        ++n;
        for (int i = 0; i < 2; ++i, ++n) {
            double d = a.pose.translation[i] - b.pose.translation[i];
            acc += d * d;
        }
        return std::sqrt(acc / n);
    };

    int noiseless_ok = 0, noisy_ok = 0;
    double worst_param = 0, worst_reproj = 0, worst_noisy = 0;
    for (int trial = 0; trial < 50; ++trial) {
        MorphParams truth = sample_params();
        Keypoints2D clean = project_shape(synth_shape(model, truth), truth.pose);
        FitResult fit = fit_morphable(clean, model);
        double prmse = params_rmse(fit.params, truth);
        worst_param = std::max(worst_param, prmse);
        worst_reproj = std::max(worst_reproj, fit.reproj_rmse);
        if (prmse < 1e-3 && fit.reproj_rmse < 1e-6) noiseless_ok++;

        Keypoints2D noisy = clean;
        for (auto& p : noisy.points) {
            p[0] += rng.normal(0.0, 0.5);
            p[1] += rng.normal(0.0, 0.5);
        }
        FitResult nfit = fit_morphable(noisy, model);
        worst_noisy = std::max(worst_noisy, nfit.reproj_rmse);
        if (nfit.reproj_rmse <= 1.5) noisy_ok++;
    }
    bool pass = noiseless_ok == 50 && noisy_ok == 50;
    char detail[160];
    std::snprintf(detail, sizeof detail,
                  "noiseless %d/50 (worst prmse %.2g, reproj %.2g); noisy %d/50 (worst %.3f px), %.0fs",
                  noiseless_ok, worst_param, worst_reproj, noisy_ok, worst_noisy, elapsed_s(t0));
    report(3, "3DMM fit round trip", pass, detail);
}

// ---------------------------------------------------------------------------
// 4. Eq-style gate law
// ---------------------------------------------------------------------------
void criterion_4() {
    Rng rng(44);
    bool pass = true;
    const double alpha = 0.1;
    for (int i = 0; i < 16; ++i) {
        // Random per-sample losses with a mixed detector outcome.
        Tensor eps = Tensor::randn({4, 4, 4}, rng);
        Tensor eps_hat = Tensor::randn({4, 4, 4}, rng);
        double l_sd_i = loss_sd(eps, eps_hat);

        ImageTensor img(8, 8);
        for (auto& p : img.pixels) p = rng.uniform();
        Tensor f_id = Tensor::randn({6}, rng);
        int gate = static_cast<int>(rng.uniform_int(2));
        DetectorFn det = [gate](const ImageTensor&) { return gate; };
        EmbedFn embed = [&](const ImageTensor&) { return Tensor::randn({6}, rng); };
        double l_id_i = loss_id(img, f_id, det, embed);

        double contribution = total_loss(l_sd_i, l_id_i, alpha);
        if (gate == 0) {
            // Exact equality: a gated-off sample contributes exactly loss_sd.
            if (!(l_id_i == 0.0) || !(contribution == l_sd_i)) pass = false;
        } else {
            if (!(l_id_i >= 0.0) || contribution < l_sd_i) pass = false;
        }
    }

    // The same law through the training-graph path.
    Config cfg = toy_grad_config();
    ModelState model = ModelState::build(cfg);
    auto faces = make_identity_group(model.morph, 999, 3, 64, 4);
    TrainingSet set;
    for (auto& f : faces) set.add(f.image, f.keypoints, "x", "id");
    Rng srng(5);
    TrainSample sample = make_train_sample(set, model, srng);
    Tensor eps = Tensor::randn({4, 8, 8}, srng);
    TextEmbedding text = model.backend.encode_text("x");
    DetectorFn off = [](const ImageTensor&) { return 0; };
    Graph g;
    SampleLoss sl = build_sample_loss_graph(g, model, sample, 500, eps, text, false, true, off);
    if (sl.has_id || sl.gate != 0) pass = false;

    report(4, "identity-loss gate law (exact equality)", pass);
}

// ---------------------------------------------------------------------------
// 5. Selection oracle
// ---------------------------------------------------------------------------
void criterion_5() {
    Rng rng(55);
    bool pass = true;
    int ties_seen = 0;
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + static_cast<int>(rng.uniform_int(8));
        std::vector<double> q(static_cast<size_t>(n)), a(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            q[static_cast<size_t>(i)] = rng.uniform_int(5) / 4.0;  // quantized: ties happen
            a[static_cast<size_t>(i)] = rng.uniform_int(5) / 4.0;
        }
        double lambda = rng.uniform_int(5) / 4.0;

        // Brute-force score-and-argmax oracle with lowest-index tie break.
        int best = 0;
        double best_total = q[0] + lambda * a[0];
        bool tie = false;
        for (int i = 1; i < n; ++i) {
            double total = q[static_cast<size_t>(i)] + lambda * a[static_cast<size_t>(i)];
            if (total == best_total) tie = true;
            if (total > best_total) {
                best_total = total;
                best = i;
            }
        }
        if (tie) ties_seen++;
        if (argmax_score(q, a, lambda) != best) pass = false;

        // lambda = 0 degenerates to the quality argmax.
        int q_best = 0;
        for (int i = 1; i < n; ++i)
            if (q[static_cast<size_t>(i)] > q[static_cast<size_t>(q_best)]) q_best = i;
        if (argmax_score(q, a, 0.0) != q_best) pass = false;
    }
    report(5, "reference-score selection vs brute force", pass && ties_seen > 20,
           std::to_string(ties_seen) + " tied sets exercised");
}

// ---------------------------------------------------------------------------
// 6. k-means verification oracle
// ---------------------------------------------------------------------------
namespace oracle {
// Lloyd iteration matching the production definition of a k-means optimum;
// initial centers enumerated exhaustively instead of seeded k-means++.
double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

struct Clustering {
    std::vector<int> assignment;
    std::vector<std::vector<double>> centroids;
    double inertia = 1e300;
};

Clustering lloyd(const std::vector<std::vector<double>>& pts, int k,
                 std::vector<std::vector<double>> centers) {
    int n = static_cast<int>(pts.size());
    Clustering res;
    res.assignment.assign(static_cast<size_t>(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq_dist(pts[static_cast<size_t>(i)], centers[0]);
            for (int c = 1; c < k; ++c) {
                double d = sq_dist(pts[static_cast<size_t>(i)], centers[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (res.assignment[static_cast<size_t>(i)] != best) {
                res.assignment[static_cast<size_t>(i)] = best;
                changed = true;
            }
        }
        std::vector<std::vector<double>> next(static_cast<size_t>(k),
                                              std::vector<double>(pts[0].size(), 0.0));
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            counts[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])]++;
            for (size_t d = 0; d < pts[0].size(); ++d)
                next[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])][d] +=
                    pts[static_cast<size_t>(i)][d];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                next[static_cast<size_t>(c)] = centers[static_cast<size_t>(c)];
                continue;
            }
            for (size_t d = 0; d < pts[0].size(); ++d)
                next[static_cast<size_t>(c)][d] /= counts[static_cast<size_t>(c)];
        }
        centers = std::move(next);
        if (!changed && iter > 0) break;
    }
    res.centroids = centers;
    res.inertia = 0;
    for (int i = 0; i < n; ++i)
        res.inertia += sq_dist(pts[static_cast<size_t>(i)],
                               centers[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])]);
    return res;
}

// Accepted indices per the verification rule, from the exhaustive search.
std::set<int> accepted_set(const std::vector<std::vector<double>>& pts, int k, double threshold) {
    int n = static_cast<int>(pts.size());
    Clustering best;
    std::vector<int> combo(static_cast<size_t>(k));
    std::function<void(int, int)> enumerate = [&](int start, int depth) {
        if (depth == k) {
            std::vector<std::vector<double>> centers;
            for (int idx : combo) centers.push_back(pts[static_cast<size_t>(idx)]);
            Clustering c = lloyd(pts, k, std::move(centers));
            if (c.inertia < best.inertia - 1e-12) best = c;
            return;
        }
        for (int i = start; i < n; ++i) {
            combo[static_cast<size_t>(depth)] = i;
            enumerate(i + 1, depth + 1);
        }
    };
    enumerate(0, 0);

    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int a : best.assignment) counts[static_cast<size_t>(a)]++;
    int best_cluster = -1, best_count = -1;
    for (size_t i = 0; i < best.assignment.size(); ++i) {
        int c = best.assignment[i];
        if (counts[static_cast<size_t>(c)] > best_count) {
            best_count = counts[static_cast<size_t>(c)];
            best_cluster = c;
        }
    }
    const std::vector<double>& target = best.centroids[static_cast<size_t>(best_cluster)];
    std::set<int> out;
    for (int i = 0; i < n; ++i)
        if (cosine_similarity(pts[static_cast<size_t>(i)], target) > threshold) out.insert(i);
    return out;
}
}  // namespace oracle

void criterion_6() {
    auto t0 = std::chrono::steady_clock::now();
    PipelineOptions opts;
    Rng rng(66);
    int agree = 0;
    const int kTrials = 50;
    for (int trial = 0; trial < kTrials; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(7));  // 2..8
        int core = std::max(2, n - 1 - static_cast<int>(rng.uniform_int(3)));
        core = std::min(core, n);
        const int dim = 6;
        std::vector<double> center(dim);
        for (auto& v : center) v = rng.normal();
        std::vector<std::vector<double>> pts;
        for (int i = 0; i < core; ++i) {
            std::vector<double> p = center;
            for (auto& v : p) v += 0.05 * rng.normal();
            pts.push_back(p);
        }
        while (static_cast<int>(pts.size()) < n) {
            std::vector<double> p(dim);
            for (auto& v : p) v = 3.0 * rng.normal();
            pts.push_back(p);
        }
        // Shuffle so cluster membership is not index-correlated.
        for (size_t i = pts.size(); i > 1; --i)
            std::swap(pts[i - 1], pts[static_cast<size_t>(rng.uniform_int(i))]);

        int k = std::min(opts.kmeans_k, n);
        std::set<int> want = oracle::accepted_set(pts, k, opts.sim_threshold);

        std::vector<CuratedRecord> group;
        for (int i = 0; i < n; ++i) {
            CuratedRecord r;
            r.identity = "g";
            r.path = "p" + std::to_string(i);
            r.embedding = pts[static_cast<size_t>(i)];
            group.push_back(std::move(r));
        }
        stage_verify(group, opts);
        std::set<int> got;
        for (int i = 0; i < n; ++i)
            if (!group[static_cast<size_t>(i)].rejected()) got.insert(i);
        if (got == want) agree++;
    }

    // Boundary case: cosine similarity exactly 0.7 is rejected.
    std::vector<CuratedRecord> boundary;
    for (int i = 0; i < 5; ++i) {
        CuratedRecord r;
        r.identity = "b";
        r.path = "q" + std::to_string(i);
        r.embedding = {1.0, 0.0};
        boundary.push_back(std::move(r));
    }
    CuratedRecord edge;
    edge.identity = "b";
    edge.path = "q_edge";
    edge.embedding = {7.0, std::sqrt(51.0)};
    boundary.push_back(std::move(edge));
    stage_verify(boundary, opts);
    bool boundary_ok =
        cosine_similarity(boundary[5].embedding, {1.0, 0.0}) == 0.7 && boundary[5].rejected();

    char detail[96];
    std::snprintf(detail, sizeof detail, "oracle agreement %d/%d; 0.7 boundary %s, %.0fs", agree,
                  kTrials, boundary_ok ? "rejected" : "NOT rejected", elapsed_s(t0));
    report(6, "k-means verification vs exhaustive Lloyd", agree == kTrials && boundary_ok, detail);
}

// ---------------------------------------------------------------------------
// 7. Pipeline thresholds on the planted corpus
// ---------------------------------------------------------------------------
void criterion_7() {
    auto t0 = std::chrono::steady_clock::now();
    std::string corpus = g_work + "/corpus";
    std::string out = g_work + "/pipeline_out";
    fs::remove_all(corpus);
    fs::remove_all(out);
    CorpusPlan plan;
    plan.dir = corpus;
    PlantedViolations planted = make_pipeline_corpus(plan);

    Config cfg;
    cfg.pipeline.out_size = 256;  // desk-scale output size
    ToyBackend backend;
    run_pipeline(corpus, out, cfg, backend, default_pipeline_hooks());

    // Collect every record's final outcome from the last stage checkpoint.
    std::map<std::string, std::pair<std::string, std::string>> rejected;  // path -> stage, reason
    int accepted = 0, total = 0;
    std::ifstream in(out + "/stage_caption.jsonl");
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CuratedRecord r = CuratedRecord::from_json_line(line);
        total++;
        if (r.rejected())
            rejected[r.path] = {r.reject_stage(), r.reject_reason()};
        else
            accepted++;
    }

    auto expect = [&](const std::string& path, const std::string& stage,
                      const std::string& reason_prefix) {
        auto it = rejected.find(path);
        if (it == rejected.end()) return false;
        return it->second.first == stage && it->second.second.rfind(reason_prefix, 0) == 0;
    };
    bool pass = total == 30 && rejected.size() == 6 && accepted == 24 &&
                expect(planted.two_faces, "detect", "face_count=2") &&
                expect(planted.small_area, "detect", "area_ratio") &&
                expect(planted.small_image, "detect", "min_size") &&
                expect(planted.low_quality, "cleanse", "quality") &&
                expect(planted.occluded, "cleanse", "occlusion:microphone") &&
                expect(planted.outlier, "verify", "similarity");

    std::string detail = std::to_string(rejected.size()) + " rejections / " +
                         std::to_string(total) + " records";
    if (!pass)
        for (auto& [p, sr] : rejected)
            detail += "; " + fs::path(p).filename().string() + ":" + sr.first + "/" + sr.second;
    char timing[48];
    std::snprintf(timing, sizeof timing, ", %.0fs", elapsed_s(t0));
    report(7, "pipeline thresholds on planted corpus", pass, detail + timing);
}

// ---------------------------------------------------------------------------
// 8-9. Overfit trend and multi-reference trend (shared training run)
// ---------------------------------------------------------------------------
struct OverfitArtifacts {
    bool trained = false;
    std::string ckpt_path;
    std::string refs_dir;
    std::string target_path;
    std::vector<double> sim_at_checkpoints;
    double first100 = 0.0, last100 = 0.0;
};

double mean_sim_f_samples(ModelState& model, const TrainingSet& set, int n_seeds, int n_refs,
                          uint64_t seed_base) {
    int saved = model.cfg.sampler.n_refs;
    model.cfg.sampler.n_refs = n_refs;
    FeatureFn embed = [&](const ImageTensor& img) {
        auto crops = model.backend.detect(img);
        const ImageTensor& src = crops.empty() ? img : crops.front().image;
        Tensor e = model.backend.embed_global(src);
        return std::vector<double>(e.data.begin(), e.data.end());
    };
    double acc = 0;
    for (int s = 0; s < n_seeds; ++s) {
        GenerationRequest req;
        for (size_t i = 0; i < set.images.size() && i < 6; ++i) {
            req.refs.push_back(set.images[i]);
            auto k = set.extractor.extract(set.images[i]);
            req.ref_kps.push_back(k ? *k : Keypoints2D{});
        }
        req.target = set.images[(s + 3) % set.images.size()];
        req.target_kps = set.extractor.extract(req.target);
        req.prompt = "a portrait photo";
        req.seed = seed_base + static_cast<uint64_t>(s);
        GenerationResult gen = run_generate(model, req);
        acc += metric_sim_f(gen.image, req.refs, embed);
    }
    model.cfg.sampler.n_refs = saved;
    return acc / n_seeds;
}

OverfitArtifacts criterion_8() {
    auto t0 = std::chrono::steady_clock::now();
    OverfitArtifacts art;
    Config cfg;  // desk defaults pin the criterion: 64x64, batch 4, lr 2e-5, alpha 0.1
    ModelState model = ModelState::build(cfg);

    MorphableModel& morph = model.morph;
    std::string group_dir = g_work + "/train_group";
    fs::remove_all(group_dir);
    write_identity_group(group_dir, morph, 12345, 8, 64, 777);
    TrainingSet set = TrainingSet::from_directory(group_dir);

    VaePretrainReport vrep = vae_pretrain(model.vae, set.images, cfg.training.vae_pretrain_steps,
                                          cfg.training.vae_pretrain_lr, cfg.training.seed);
    std::printf("     VAE pretraining: reconstruction PSNR %.2f dB\n", vrep.psnr);
    std::fflush(stdout);

    TrainState st;
    init_train_state(model, st, cfg.training.seed);
    Rng data_rng(cfg.training.seed ^ 0xabcdef);
    const int kSteps = 2000;
    double first100 = 0, last100 = 0;
    for (int step = 0; step < kSteps; ++step) {
        auto batch = make_batch(set, model, data_rng, cfg.training.batch_size);
        LossReport rep = train_step(model, st, batch);
        if (step < 100) first100 += rep.l_sd / 100.0;
        if (step >= kSteps - 100) last100 += rep.l_sd / 100.0;
        if (step + 1 == 500 || step + 1 == 1000 || step + 1 == 2000) {
            double sim = mean_sim_f_samples(model, set, 6, 4, 9000);
            art.sim_at_checkpoints.push_back(sim);
            std::printf("     step %4d: sim_f %.4f (l_sd last batch %.3f)\n", step + 1, sim,
                        rep.l_sd);
            std::fflush(stdout);
        }
    }
    assert_frozen(model, st);
    art.first100 = first100;
    art.last100 = last100;

    // Persist artifacts for the remaining criteria.
    art.ckpt_path = g_work + "/overfit.hfpc";
    save_checkpoint(art.ckpt_path, model);
    art.refs_dir = group_dir;
    art.target_path = group_dir + "/face_7.png";
    art.trained = true;

    bool loss_ok = last100 <= 0.5 * first100;
    bool trend_ok = art.sim_at_checkpoints.size() == 3 &&
                    art.sim_at_checkpoints[0] < art.sim_at_checkpoints[1] &&
                    art.sim_at_checkpoints[1] < art.sim_at_checkpoints[2];
    char detail[192];
    std::snprintf(detail, sizeof detail,
                  "l_sd %.3f -> %.3f (%.0f%%); sim_f %.3f / %.3f / %.3f; %.0fs", first100, last100,
                  100.0 * (1.0 - last100 / first100), art.sim_at_checkpoints[0],
                  art.sim_at_checkpoints[1], art.sim_at_checkpoints[2], elapsed_s(t0));
    report(8, "toy overfit trend (loss halves, sim_f rises)", loss_ok && trend_ok, detail);
    return art;
}

void criterion_9(const OverfitArtifacts& art) {
    auto t0 = std::chrono::steady_clock::now();
    ModelState model = load_checkpoint_state(art.ckpt_path);
    TrainingSet set = TrainingSet::from_directory(art.refs_dir);
    double sim_n1 = mean_sim_f_samples(model, set, 16, 1, 5000);
    double sim_n4 = mean_sim_f_samples(model, set, 16, 4, 5000);
    char detail[96];
    std::snprintf(detail, sizeof detail, "sim_f N=4 %.4f vs N=1 %.4f over 16 seeds, %.0fs", sim_n4,
                  sim_n1, elapsed_s(t0));
    report(9, "multi-reference trend (N=4 >= N=1)", sim_n4 >= sim_n1, detail);
}

// ---------------------------------------------------------------------------
// 10. Reference-permutation invariance of generate()
// ---------------------------------------------------------------------------
void criterion_10(const OverfitArtifacts& art) {
    ModelState model = load_checkpoint_state(art.ckpt_path);
    TrainingSet set = TrainingSet::from_directory(art.refs_dir);
    model.cfg.selection.strategy = "manual";
    model.cfg.selection.manual_index = 1;  // the same physical image in both orders

    GenerationRequest req;
    for (int i = 0; i < 4; ++i) {
        req.refs.push_back(set.images[static_cast<size_t>(i)]);
        auto k = set.extractor.extract(set.images[static_cast<size_t>(i)]);
        req.ref_kps.push_back(k ? *k : Keypoints2D{});
    }
    req.target = set.images[5];
    req.target_kps = set.extractor.extract(req.target);
    req.prompt = "a portrait photo";
    req.seed = 777;
    GenerationResult base = run_generate(model, req);

    GenerationRequest perm = req;
    int order[4] = {3, 1, 0, 2};  // slot 1 keeps the selected landmark reference
    for (int i = 0; i < 4; ++i) {
        perm.refs[static_cast<size_t>(i)] = req.refs[static_cast<size_t>(order[i])];
        perm.ref_kps[static_cast<size_t>(i)] = req.ref_kps[static_cast<size_t>(order[i])];
    }
    GenerationResult permuted = run_generate(model, perm);

    double max_diff = 0.0;
    for (size_t i = 0; i < base.image.pixels.size(); ++i)
        max_diff = std::max(max_diff, std::fabs(base.image.pixels[i] - permuted.image.pixels[i]));
    char detail[64];
    std::snprintf(detail, sizeof detail, "max abs pixel diff %.3g", max_diff);
    report(10, "reference-permutation invariance of generate()", max_diff < 1e-6, detail);
}

// ---------------------------------------------------------------------------
// 11. End-to-end determinism through the CLI
// ---------------------------------------------------------------------------
bool files_equal(const std::string& a, const std::string& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !ca.empty() && ca == cb;
}

void criterion_11(const OverfitArtifacts& art) {
    auto t0 = std::chrono::steady_clock::now();
    std::string out1 = g_work + "/gen_a.png";
    std::string out2 = g_work + "/gen_b.png";
    std::string cmd_base = std::string(PORTRAITGEN_BIN) + " generate --ckpt " + art.ckpt_path +
                           " --refs " + art.refs_dir + " --target " + art.target_path +
                           " --prompt \"a studio portrait\" --seed 42 --out ";
    int rc1 = std::system((cmd_base + out1 + " > /dev/null 2>&1").c_str());
    int rc2 = std::system((cmd_base + out2 + " > /dev/null 2>&1").c_str());
    bool pass = rc1 == 0 && rc2 == 0 && files_equal(out1, out2) &&
                files_equal(out1 + ".json", out2 + ".json");
    char detail[96];
    std::snprintf(detail, sizeof detail, "two CLI runs byte-identical (PNG + sidecar), %.0fs",
                  elapsed_s(t0));
    report(11, "end-to-end determinism via CLI", pass, detail);
}

// ---------------------------------------------------------------------------
// 12. Ablation harness row structure
// ---------------------------------------------------------------------------
void criterion_12(const OverfitArtifacts& art) {
    auto t0 = std::chrono::steady_clock::now();
    ModelState model = load_checkpoint_state(art.ckpt_path);
    model.cfg.sampler.steps = 4;  // structural check only
    TrainingSet set = TrainingSet::from_directory(art.refs_dir);
    std::string out = g_work + "/ablate";

    bool pass = true;
    std::string detail;
    struct Expect {
        const char* axis;
        std::vector<std::string> rows;
    };
    std::vector<Expect> expectations = {
        {"fusion_mode", {"local", "global", "concat", "face-refiner"}},
        {"condition_type", {"none-adapter", "keypoints", "landmarks"}},
        {"n_refs", {"1", "2", "3", "4", "5", "6"}},
        {"selection_strategy", {"target", "random", "quality", "angle", "manual", "quality-angle"}},
    };
    for (const auto& exp : expectations) {
        AblateReport rep = run_ablate(model, exp.axis, set, out, 1);
        bool ok = rep.rows.size() == exp.rows.size();
        for (size_t i = 0; ok && i < exp.rows.size(); ++i) {
            ok = rep.rows[i].value == exp.rows[i] && fs::exists(rep.rows[i].grid_image);
        }
        pass = pass && ok;
        detail += std::string(exp.axis) + ":" + std::to_string(rep.rows.size()) + " ";
    }
    char timing[48];
    std::snprintf(timing, sizeof timing, "rows, %.0fs", elapsed_s(t0));
    report(12, "ablation harness row structure", pass, detail + timing);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1) g_work = argv[1];
    fs::create_directories(g_work);
    std::printf("acceptance suite; workspace %s\n", g_work.c_str());

    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    OverfitArtifacts art = criterion_8();
    criterion_9(art);
    criterion_10(art);
    criterion_11(art);
    criterion_12(art);

    std::printf("%s: %d/12 criteria passed\n", g_failures == 0 ? "SUCCESS" : "FAILURE",
                12 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
