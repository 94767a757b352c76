#include "portrait/dataset_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"
#include "portrait/rng.hpp"

namespace portrait {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Record serialization
// ---------------------------------------------------------------------------

std::string CuratedRecord::to_json_line() const {
    json j;
    j["path"] = path;
    j["out_path"] = out_path;
    j["identity"] = identity;
    j["source"] = source;
    j["bbox"] = {bbox_x, bbox_y, bbox_w, bbox_h};
    j["face_area_ratio"] = face_area_ratio;
    j["quality"] = quality;
    j["caption"] = caption;
    j["embedding"] = embedding;
    j["gender"] = gender;
    j["age"] = age;
    json flags = json::array();
    for (const auto& f : stage_flags)
        flags.push_back({{"stage", f.stage}, {"passed", f.passed}, {"reason", f.reason}});
    j["stage_flags"] = flags;
    return j.dump();
}

CuratedRecord CuratedRecord::from_json_line(const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) raise(ErrorCode::IOFailure, "malformed manifest line");
    CuratedRecord r;
    r.path = j.value("path", "");
    r.out_path = j.value("out_path", "");
    r.identity = j.value("identity", "");
    r.source = j.value("source", "fixture");
    if (j.contains("bbox") && j["bbox"].size() == 4) {
        r.bbox_x = j["bbox"][0];
        r.bbox_y = j["bbox"][1];
        r.bbox_w = j["bbox"][2];
        r.bbox_h = j["bbox"][3];
    }
    r.face_area_ratio = j.value("face_area_ratio", 0.0);
    r.quality = j.value("quality", 0.0);
    r.caption = j.value("caption", "");
    if (j.contains("embedding")) r.embedding = j["embedding"].get<std::vector<double>>();
    r.gender = j.value("gender", "");
    r.age = j.value("age", 0);
    if (j.contains("stage_flags"))
        for (const auto& f : j["stage_flags"])
            r.stage_flags.push_back({f.value("stage", ""), f.value("passed", true),
                                     f.value("reason", "")});
    return r;
}

PipelineOptions PipelineOptions::from_config(const Config& cfg) {
    PipelineOptions o;
    o.min_size = cfg.pipeline.min_size;
    o.area_ratio = cfg.pipeline.area_ratio;
    o.out_size = cfg.pipeline.out_size;
    o.quality_threshold = cfg.pipeline.quality_threshold;
    o.sim_threshold = cfg.pipeline.sim_threshold;
    o.kmeans_k = cfg.pipeline.kmeans_k;
    o.kmeans_restarts = cfg.pipeline.kmeans_restarts;
    o.kmeans_seed = cfg.pipeline.kmeans_seed;
    o.min_group = cfg.pipeline.min_group;
    o.occlusion_keywords.clear();
    std::stringstream ss(cfg.pipeline.occlusion_keywords);
    std::string token;
    while (std::getline(ss, token, ','))
        if (!token.empty()) o.occlusion_keywords.push_back(token);
    return o;
}

PipelineHooks default_pipeline_hooks() {
    PipelineHooks hooks;
    hooks.quality = [](const CuratedRecord& rec, const ImageTensor& img) {
        auto meta = read_fixture_meta(rec.path);
        if (meta && meta->quality_override) return *meta->quality_override;
        return sharpness_score(img);
    };
    hooks.watermark = [](const CuratedRecord& rec) {
        auto meta = read_fixture_meta(rec.path);
        return meta ? meta->watermark : false;
    };
    hooks.description = [](const CuratedRecord& rec) {
        auto meta = read_fixture_meta(rec.path);
        return meta ? meta->description : std::string();
    };
    hooks.restore = [](const ImageTensor& img) { return img; };
    hooks.captioner = [](const CuratedRecord& rec) -> std::string {
        auto meta = read_fixture_meta(rec.path);
        if (!meta) raise(ErrorCode::CaptionerUnavailable, "no metadata for " + rec.path);
        // Deterministic template fill standing in for the vision-language
        // captioner invoked with kCaptionPrompt.
        return "a portrait of a person with " + meta->hair_name + " hair on a " +
               meta->background_name + " background";
    };
    return hooks;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

DetectOutcome stage_detect(const RawRecord& raw, const EncoderBackend& backend,
                           const PipelineOptions& opts) {
    DetectOutcome out;
    CuratedRecord& rec = out.record;
    rec.path = raw.path;
    rec.identity = raw.claimed_id;
    rec.source = raw.source;

    ImageTensor img;
    try {
        img = read_png(raw.path);
    } catch (const Error&) {
        raise(ErrorCode::UnreadableImage, raw.path);
    }
    auto meta = read_fixture_meta(raw.path);
    if (meta) {
        rec.gender = meta->gender;
        rec.age = meta->age;
        if (rec.identity.empty()) rec.identity = meta->claimed_id;
    }

    std::vector<FaceCrop> faces = backend.detect(img);
    if (faces.size() != 1) {
        rec.stage_flags.push_back(
            {"detect", false, "face_count=" + std::to_string(faces.size())});
        return out;
    }
    const FaceCrop& face = faces.front();
    int side = std::min(img.width, img.height);  // maximal square crop
    rec.bbox_x = face.x;
    rec.bbox_y = face.y;
    rec.bbox_w = face.w;
    rec.bbox_h = face.h;
    rec.face_area_ratio =
        static_cast<double>(face.w) * face.h / (static_cast<double>(side) * side);
    if (!(rec.face_area_ratio > opts.area_ratio)) {
        rec.stage_flags.push_back({"detect", false, "area_ratio"});
        return out;
    }
    if (side < opts.min_size) {
        rec.stage_flags.push_back({"detect", false, "min_size"});
        return out;
    }
    // Largest square satisfying the constraint, centered on the face box.
    int cx = face.x + face.w / 2, cy = face.y + face.h / 2;
    int x0 = std::clamp(cx - side / 2, 0, img.width - side);
    int y0 = std::clamp(cy - side / 2, 0, img.height - side);
    ImageTensor crop = img.crop(x0, y0, side, side);
    out.output = crop.resize_area(opts.out_size, opts.out_size);

    // Identity embedding from the detected face crop.
    ToyBackendConfig unused;
    std::vector<FaceCrop> one = {face};
    GlobalFeatures emb = backend.encode_global(one);
    rec.embedding.resize(static_cast<size_t>(emb.d2));
    for (int i = 0; i < emb.d2; ++i) rec.embedding[static_cast<size_t>(i)] = emb.embedding.at3(0, 0, i);

    // Map fixture keypoints into the resized crop for downstream training.
    auto kps = read_fixture_keypoints(raw.path);
    if (kps) {
        double scale = static_cast<double>(opts.out_size) / side;
        out.output_keypoints = *kps;
        for (auto& p : out.output_keypoints.points) {
            p[0] = (p[0] - x0) * scale;
            p[1] = (p[1] - y0) * scale;
        }
        out.has_keypoints = true;
    }
    rec.stage_flags.push_back({"detect", true, ""});
    out.passed = true;
    return out;
}

bool stage_cleanse(CuratedRecord& rec, ImageTensor& image, const PipelineHooks& hooks,
                   const PipelineOptions& opts) {
    rec.quality = hooks.quality(rec, image);
    if (rec.quality < opts.quality_threshold) {
        rec.stage_flags.push_back({"cleanse", false, "quality"});
        return false;
    }
    if (hooks.watermark(rec)) {
        rec.stage_flags.push_back({"cleanse", false, "watermark"});
        return false;
    }
    std::string desc = hooks.description(rec);
    std::transform(desc.begin(), desc.end(), desc.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    for (const std::string& kw : opts.occlusion_keywords) {
        if (desc.find(kw) != std::string::npos) {
            rec.stage_flags.push_back({"cleanse", false, "occlusion:" + kw});
            return false;
        }
    }
    image = hooks.restore(image);
    rec.stage_flags.push_back({"cleanse", true, ""});
    return true;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom <= 0.0) return 0.0;
    return dot / denom;
}

namespace {
double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

KMeansResult lloyd(const std::vector<std::vector<double>>& pts, int k,
                   std::vector<std::vector<double>> centers) {
    const int n = static_cast<int>(pts.size());
    KMeansResult res;
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
                next[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])][d] += pts[static_cast<size_t>(i)][d];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                next[static_cast<size_t>(c)] = centers[static_cast<size_t>(c)];  // keep empty centers in place
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
}  // namespace

KMeansResult kmeans_cluster(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                            int restarts) {
    const int n = static_cast<int>(points.size());
    k = std::min(k, n);
    KMeansResult best;
    best.inertia = 1e300;
    for (int r = 0; r < std::max(1, restarts); ++r) {
        Rng rng(seed + static_cast<uint64_t>(r) * 0x9e3779b9u);
        // k-means++ seeding.
        std::vector<std::vector<double>> centers;
        centers.push_back(points[static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(n)))]);
        while (static_cast<int>(centers.size()) < k) {
            std::vector<double> d2(static_cast<size_t>(n));
            double total = 0;
            for (int i = 0; i < n; ++i) {
                double m = 1e300;
                for (const auto& c : centers) m = std::min(m, sq_dist(points[static_cast<size_t>(i)], c));
                d2[static_cast<size_t>(i)] = m;
                total += m;
            }
            if (total <= 0) {
                centers.push_back(points[static_cast<size_t>(centers.size() % static_cast<size_t>(n))]);
                continue;
            }
            double pick = rng.uniform() * total;
            int chosen = n - 1;
            double acc = 0;
            for (int i = 0; i < n; ++i) {
                acc += d2[static_cast<size_t>(i)];
                if (acc >= pick) {
                    chosen = i;
                    break;
                }
            }
            centers.push_back(points[static_cast<size_t>(chosen)]);
        }
        KMeansResult res = lloyd(points, k, std::move(centers));
        if (res.inertia < best.inertia - 1e-12) best = res;
    }
    return best;
}

void stage_verify(std::vector<CuratedRecord>& group, const PipelineOptions& opts) {
    if (group.empty()) return;
    // Canonical order: clustering runs on path-sorted embeddings so input
    // permutations cannot change the outcome.
    std::vector<int> order(group.size());
    for (size_t i = 0; i < group.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return group[static_cast<size_t>(a)].path < group[static_cast<size_t>(b)].path; });
    std::vector<std::vector<double>> pts;
    pts.reserve(group.size());
    for (int idx : order) pts.push_back(group[static_cast<size_t>(idx)].embedding);

    int k = std::min(opts.kmeans_k, static_cast<int>(pts.size()));
    KMeansResult km = kmeans_cluster(pts, k, opts.kmeans_seed, opts.kmeans_restarts);

    // Largest cluster; ties resolve toward the cluster holding the lowest
    // sorted index.
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int a : km.assignment) counts[static_cast<size_t>(a)]++;
    int best_cluster = -1, best_count = -1;
    for (size_t i = 0; i < km.assignment.size(); ++i) {
        int c = km.assignment[i];
        if (counts[static_cast<size_t>(c)] > best_count) {
            best_count = counts[static_cast<size_t>(c)];
            best_cluster = c;
        }
    }
    const std::vector<double>& target = km.centroids[static_cast<size_t>(best_cluster)];

    for (size_t i = 0; i < order.size(); ++i) {
        CuratedRecord& rec = group[static_cast<size_t>(order[i])];
        double sim = cosine_similarity(rec.embedding, target);
        if (sim > opts.sim_threshold)
            rec.stage_flags.push_back({"verify", true, ""});
        else
            rec.stage_flags.push_back({"verify", false, "similarity"});
    }
}

void stage_caption(CuratedRecord& rec, const PipelineHooks& hooks) {
    try {
        rec.caption = hooks.captioner(rec);
        rec.stage_flags.push_back({"caption", true, ""});
    } catch (const Error& e) {
        if (e.code() != ErrorCode::CaptionerUnavailable) throw;
        rec.caption.clear();
        // Non-fatal: the record is retained with an empty caption.
        rec.stage_flags.push_back({"caption", true, "captioner_unavailable"});
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string ManifestStats::to_json() const {
    json j;
    j["identities"] = identities;
    j["images"] = images;
    j["images_per_id_mean"] = images_per_id_mean;
    j["images_per_id"] = images_per_id;
    json cs = json::object();
    for (auto& [k, v] : cluster_size_histogram) cs[std::to_string(k)] = v;
    j["cluster_size_histogram"] = cs;
    json fa = json::object();
    for (auto& [k, v] : face_area_histogram) fa[std::to_string(k / 10.0)] = v;
    j["face_area_histogram"] = fa;
    json ah = json::object();
    for (auto& [k, v] : age_histogram) ah[std::to_string(k * 10) + "s"] = v;
    j["age_histogram"] = ah;
    j["gender_histogram"] = gender_histogram;
    return j.dump(2);
}

ManifestStats build_manifest(const std::vector<CuratedRecord>& accepted, const std::string& out_path,
                             const std::string& config_hash, const PipelineOptions& opts) {
    if (accepted.empty())
        raise(ErrorCode::InsufficientSamples, "build_manifest: no accepted records");
    std::map<std::string, std::vector<const CuratedRecord*>> groups;
    for (const auto& rec : accepted) groups[rec.identity].push_back(&rec);

    std::vector<const CuratedRecord*> kept;
    ManifestStats stats;
    for (auto& [identity, records] : groups) {
        if (static_cast<int>(records.size()) < opts.min_group) continue;
        std::sort(records.begin(), records.end(),
                  [](const CuratedRecord* a, const CuratedRecord* b) { return a->path < b->path; });
        stats.identities++;
        stats.images_per_id[identity] = static_cast<int>(records.size());
        stats.cluster_size_histogram[static_cast<int>(records.size())]++;
        for (const CuratedRecord* r : records) {
            kept.push_back(r);
            stats.images++;
            stats.face_area_histogram[static_cast<int>(r->face_area_ratio * 10)]++;
            if (r->age > 0) stats.age_histogram[r->age / 10]++;
            if (!r->gender.empty()) stats.gender_histogram[r->gender]++;
        }
    }
    if (kept.empty())
        raise(ErrorCode::InsufficientSamples, "build_manifest: every identity group is below min_group");
    stats.images_per_id_mean = static_cast<double>(stats.images) / stats.identities;

    std::ofstream out(out_path);
    if (!out) raise(ErrorCode::IOFailure, "cannot write manifest: " + out_path);
    json header;
    header["type"] = "header";
    header["schema_version"] = 1;
    header["config_hash"] = config_hash;
    out << header.dump() << "\n";
    for (const CuratedRecord* r : kept) out << r->to_json_line() << "\n";
    if (!out) raise(ErrorCode::IOFailure, "manifest write failed: " + out_path);

    std::ofstream stats_out(out_path + ".stats.json");
    stats_out << stats.to_json() << "\n";
    return stats;
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::IOFailure, "cannot read manifest: " + path);
    Manifest m;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first) {
            json h = json::parse(line, nullptr, false);
            if (h.is_discarded() || h.value("type", "") != "header")
                raise(ErrorCode::IOFailure, "manifest missing header line");
            m.schema_version = h.value("schema_version", 0);
            m.config_hash = h.value("config_hash", "");
            first = false;
            continue;
        }
        m.records.push_back(CuratedRecord::from_json_line(line));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace {

std::vector<RawRecord> gather_inputs(const std::string& input) {
    std::vector<RawRecord> raws;
    if (fs::is_directory(input)) {
        std::vector<std::string> paths;
        for (const auto& entry : fs::directory_iterator(input))
            if (entry.path().extension() == ".png") paths.push_back(entry.path().string());
        std::sort(paths.begin(), paths.end());
        for (const std::string& p : paths) {
            RawRecord r;
            r.path = p;
            auto meta = read_fixture_meta(p);
            if (meta) {
                r.claimed_id = meta->claimed_id;
                r.source = meta->source;
            }
            raws.push_back(std::move(r));
        }
    } else {
        Manifest m = load_manifest(input);
        for (const auto& rec : m.records) {
            RawRecord r;
            r.path = rec.out_path.empty() ? rec.path : rec.out_path;
            r.claimed_id = rec.identity;
            r.source = rec.source;
            raws.push_back(std::move(r));
        }
    }
    // Canonical processing order.
    std::sort(raws.begin(), raws.end(), [](const RawRecord& a, const RawRecord& b) {
        if (a.claimed_id != b.claimed_id) return a.claimed_id < b.claimed_id;
        return a.path < b.path;
    });
    return raws;
}

void write_stage_checkpoint(const std::string& path, const std::vector<CuratedRecord>& records) {
    std::ofstream out(path);
    for (const auto& r : records) out << r.to_json_line() << "\n";
}

bool load_stage_checkpoint(const std::string& path, std::vector<CuratedRecord>& records) {
    std::ifstream in(path);
    if (!in) return false;
    records.clear();
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) records.push_back(CuratedRecord::from_json_line(line));
    return true;
}

bool stage_enabled(const std::vector<std::string>& stages, const std::string& name) {
    return std::find(stages.begin(), stages.end(), name) != stages.end();
}

}  // namespace

PipelineRunReport run_pipeline(const std::string& input, const std::string& out_dir,
                               const Config& cfg, const EncoderBackend& backend,
                               const PipelineHooks& hooks,
                               const std::vector<std::string>& stages) {
    PipelineOptions opts = PipelineOptions::from_config(cfg);
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/images");
    PipelineRunReport report;

    std::vector<RawRecord> raws = gather_inputs(input);
    report.input_count = static_cast<int>(raws.size());

    // Stage: detect (+ crop/resize outputs with carried sidecars).
    std::vector<CuratedRecord> records;
    std::string detect_ckpt = out_dir + "/stage_detect.jsonl";
    if (!load_stage_checkpoint(detect_ckpt, records)) {
        std::vector<DetectOutcome> outcomes;
        for (const RawRecord& raw : raws) outcomes.push_back(stage_detect(raw, backend, opts));
        int counter = 0;
        for (auto& oc : outcomes) {
            if (oc.passed && stage_enabled(stages, "detect")) {
                std::string stem = "img_" + std::to_string(counter);
                std::string out_png = out_dir + "/images/" + stem + ".png";
                write_png(out_png, oc.output);
                oc.record.out_path = out_png;
                auto meta = read_fixture_meta(oc.record.path);
                if (meta) {
                    FixtureMeta m = *meta;
                    FixtureFace face;
                    face.image = oc.output;
                    if (oc.has_keypoints) face.keypoints = oc.output_keypoints;
                    write_fixture_files(out_dir + "/images", stem, face, m);
                }
            }
            records.push_back(oc.record);
            counter++;
        }
        write_stage_checkpoint(detect_ckpt, records);
    }

    auto passed_so_far = [&](const CuratedRecord& r) { return !r.rejected(); };

    // Stage: cleanse.
    std::string cleanse_ckpt = out_dir + "/stage_cleanse.jsonl";
    std::vector<CuratedRecord> cleansed;
    if (stage_enabled(stages, "cleanse")) {
        if (!load_stage_checkpoint(cleanse_ckpt, cleansed)) {
            for (CuratedRecord rec : records) {
                if (passed_so_far(rec)) {
                    ImageTensor img = read_png(rec.out_path.empty() ? rec.path : rec.out_path);
                    stage_cleanse(rec, img, hooks, opts);
                }
                cleansed.push_back(std::move(rec));
            }
            write_stage_checkpoint(cleanse_ckpt, cleansed);
        }
    } else {
        cleansed = records;
    }

    // Stage: verify (per identity group).
    std::string verify_ckpt = out_dir + "/stage_verify.jsonl";
    std::vector<CuratedRecord> verified;
    if (stage_enabled(stages, "verify")) {
        if (!load_stage_checkpoint(verify_ckpt, verified)) {
            std::map<std::string, std::vector<CuratedRecord>> groups;
            std::vector<CuratedRecord> already_rejected;
            for (CuratedRecord& rec : cleansed) {
                if (passed_so_far(rec))
                    groups[rec.identity].push_back(std::move(rec));
                else
                    already_rejected.push_back(std::move(rec));
            }
            for (auto& [id, group] : groups) stage_verify(group, opts);
            for (auto& [id, group] : groups)
                for (auto& rec : group) verified.push_back(std::move(rec));
            for (auto& rec : already_rejected) verified.push_back(std::move(rec));
            std::sort(verified.begin(), verified.end(),
                      [](const CuratedRecord& a, const CuratedRecord& b) {
                          if (a.identity != b.identity) return a.identity < b.identity;
                          return a.path < b.path;
                      });
            write_stage_checkpoint(verify_ckpt, verified);
        }
    } else {
        verified = cleansed;
    }

    // Stage: caption.
    std::string caption_ckpt = out_dir + "/stage_caption.jsonl";
    std::vector<CuratedRecord> captioned;
    if (stage_enabled(stages, "caption")) {
        if (!load_stage_checkpoint(caption_ckpt, captioned)) {
            for (CuratedRecord rec : verified) {
                if (passed_so_far(rec)) stage_caption(rec, hooks);
                captioned.push_back(std::move(rec));
            }
            write_stage_checkpoint(caption_ckpt, captioned);
        }
    } else {
        captioned = verified;
    }

    std::vector<CuratedRecord> accepted;
    for (const auto& rec : captioned) {
        if (rec.rejected())
            report.rejections_by_stage[rec.reject_stage()]++;
        else
            accepted.push_back(rec);
    }
    report.accepted = static_cast<int>(accepted.size());
    report.manifest_path = out_dir + "/manifest.jsonl";
    if (!accepted.empty())
        build_manifest(accepted, report.manifest_path, cfg.hash(), opts);
    return report;
}

}  // namespace portrait
