#include "portrait/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "portrait/errors.hpp"

namespace portrait {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double r = 0, g = 0, b = 0;
    int i = static_cast<int>(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        case 5: r = v; g = p; b = q; break;
    }
    return {r, g, b};
}

const char* kHairNames[] = {"black", "brown", "red", "blond", "gray", "blue"};
const char* kBackgroundNames[] = {"studio", "beach", "forest", "city", "library", "garden"};

}  // namespace

namespace {
double luminance_of(const std::array<double, 3>& c) {
    return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
}
// Blend toward white until the luminance floor holds (saturated hues such as
// pure blue are dark even at full HSV value).
std::array<double, 3> with_min_luminance(std::array<double, 3> c, double floor) {
    double l = luminance_of(c);
    if (l >= floor) return c;
    double t = (floor - l) / (1.0 - l);
    for (double& v : c) v = v + t * (1.0 - v);
    return c;
}
std::array<double, 3> with_max_luminance(std::array<double, 3> c, double ceil) {
    double l = luminance_of(c);
    if (l <= ceil) return c;
    double f = ceil / l;
    for (double& v : c) v *= f;
    return c;
}
}  // namespace

IdentityStyle identity_style(uint64_t id_seed) {
    Rng rng(id_seed * 0x9e3779b97f4a7c15ull + 1);
    IdentityStyle s;
    // Golden-ratio hue spacing keeps distinct identities far apart in chroma.
    double hue = std::fmod(static_cast<double>(id_seed % 4096) * 0.61803398875 +
                               0.08 * rng.uniform(),
                           1.0);
    double sat = 0.55 + 0.4 * rng.uniform();
    double val = 0.62 + 0.3 * rng.uniform();
    // The blob detector thresholds luminance at 0.35: faces stay well above,
    // backgrounds well below, for every hue.
    s.skin = with_min_luminance(hsv_to_rgb(hue, sat, val), 0.55);
    double bg_hue = hue + 0.37 + 0.2 * rng.uniform();
    s.background = with_max_luminance(
        hsv_to_rgb(bg_hue, 0.5 + 0.4 * rng.uniform(), 0.08 + 0.1 * rng.uniform()), 0.18);
    s.lips = hsv_to_rgb(hue + 0.5, 0.7, 0.45);
    s.hair_name = kHairNames[rng.uniform_int(6)];
    s.background_name = kBackgroundNames[rng.uniform_int(6)];
    s.gender = rng.uniform() < 0.5 ? "female" : "male";
    s.age = 18 + static_cast<int>(rng.uniform_int(60));
    return s;
}

MorphParams sample_face_params(const MorphableModel& model, uint64_t id_seed, Rng& rng,
                               int image_size, double face_frac) {
    MorphParams p;
    Rng id_rng(id_seed * 0x9e3779b97f4a7c15ull + 7);
    p.alpha = Tensor::zeros({model.n_id});
    for (auto& a : p.alpha.data) a = id_rng.normal(0.0, 0.3);
    p.beta = Tensor::zeros({model.n_exp});
    for (auto& b : p.beta.data) b = rng.normal(0.0, 0.25);
    auto clip = [](double v, double lim) { return std::clamp(v, -lim, lim); };
    p.pose.rotation = {clip(rng.normal(0.0, 0.10), 0.4), clip(rng.normal(0.0, 0.15), 0.4),
                       clip(rng.normal(0.0, 0.08), 0.3)};
    // Mean shape spans roughly 1.9 units across.
    p.pose.scale = face_frac * image_size / 1.9 * (1.0 + 0.05 * rng.normal());
    p.pose.translation = {image_size / 2.0 + rng.normal(0.0, image_size * 0.02),
                          image_size / 2.0 + rng.normal(0.0, image_size * 0.02)};
    return p;
}

namespace {

// Andrew monotone-chain convex hull.
std::vector<std::array<double, 2>> convex_hull(std::vector<std::array<double, 2>> pts) {
    std::sort(pts.begin(), pts.end());
    auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a,
                    const std::array<double, 2>& b) {
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    int n = static_cast<int>(pts.size());
    std::vector<std::array<double, 2>> hull(static_cast<size_t>(2 * n));
    int k = 0;
    for (int i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) k--;
        hull[static_cast<size_t>(k++)] = pts[static_cast<size_t>(i)];
    }
    for (int i = n - 2, t = k + 1; i >= 0; --i) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) k--;
        hull[static_cast<size_t>(k++)] = pts[static_cast<size_t>(i)];
    }
    hull.resize(static_cast<size_t>(k - 1));
    return hull;
}

// Even-odd scanline fill.
void fill_polygon(ImageTensor& img, const std::vector<std::array<double, 2>>& poly,
                  const std::array<double, 3>& color) {
    if (poly.size() < 3) return;
    double min_y = 1e300, max_y = -1e300;
    for (auto& p : poly) {
        min_y = std::min(min_y, p[1]);
        max_y = std::max(max_y, p[1]);
    }
    int y0 = std::max(0, static_cast<int>(std::floor(min_y)));
    int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(max_y)));
    for (int y = y0; y <= y1; ++y) {
        double sy = y + 0.5;
        std::vector<double> xs;
        for (size_t i = 0; i < poly.size(); ++i) {
            const auto& a = poly[i];
            const auto& b = poly[(i + 1) % poly.size()];
            if ((a[1] <= sy && b[1] > sy) || (b[1] <= sy && a[1] > sy)) {
                double t = (sy - a[1]) / (b[1] - a[1]);
                xs.push_back(a[0] + t * (b[0] - a[0]));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            int xa = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
            int xb = std::min(img.width - 1, static_cast<int>(std::floor(xs[i + 1] - 0.5)));
            for (int x = xa; x <= xb; ++x) img.set_pixel(y, x, color[0], color[1], color[2]);
        }
    }
}

void stroke(ImageTensor& img, const Keypoints2D& kps, int lo, int hi, bool closed,
            const std::array<double, 3>& color, int thickness = 1) {
    auto draw_seg = [&](std::array<double, 2> a, std::array<double, 2> b) {
        double len = std::hypot(b[0] - a[0], b[1] - a[1]);
        int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
        for (int s = 0; s <= steps; ++s) {
            double t = static_cast<double>(s) / steps;
            double x = a[0] + t * (b[0] - a[0]);
            double y = a[1] + t * (b[1] - a[1]);
            for (int dy = -(thickness - 1); dy <= thickness - 1; ++dy)
                for (int dx = -(thickness - 1); dx <= thickness - 1; ++dx)
                    img.set_pixel(static_cast<int>(std::lround(y)) + dy,
                                  static_cast<int>(std::lround(x)) + dx, color[0], color[1],
                                  color[2]);
        }
    };
    for (int i = lo; i < hi; ++i) draw_seg(kps.points[static_cast<size_t>(i)], kps.points[static_cast<size_t>(i + 1)]);
    if (closed) draw_seg(kps.points[static_cast<size_t>(hi)], kps.points[static_cast<size_t>(lo)]);
}

std::vector<std::array<double, 2>> ring(const Keypoints2D& kps, int lo, int hi) {
    std::vector<std::array<double, 2>> out;
    for (int i = lo; i <= hi; ++i) out.push_back(kps.points[static_cast<size_t>(i)]);
    return out;
}

}  // namespace

FixtureFace render_fixture_face(const MorphableModel& model, const MorphParams& params,
                                const IdentityStyle& style, int height, int width) {
    FixtureFace out;
    out.params = params;
    out.keypoints = project_shape(synth_shape(model, params), params.pose);
    ImageTensor img(height, width);
    // Background with a mild vertical gradient; stays under the detector threshold.
    for (int y = 0; y < height; ++y) {
        double f = 0.8 + 0.4 * static_cast<double>(y) / height;
        for (int x = 0; x < width; ++x)
            img.set_pixel(y, x, style.background[0] * f, style.background[1] * f,
                          style.background[2] * f);
    }
    // Face region: convex hull of the landmarks plus a forehead extension, so
    // the brow strokes stay interior and the bright region is one component.
    {
        std::vector<std::array<double, 2>> hull_pts = out.keypoints.points;
        double top = 1e300, bottom = -1e300;
        for (auto& p : out.keypoints.points) {
            top = std::min(top, p[1]);
            bottom = std::max(bottom, p[1]);
        }
        double rise = 0.35 * (bottom - top);
        for (int idx : {17, 19, 21, 22, 24, 26})
            hull_pts.push_back({out.keypoints.points[static_cast<size_t>(idx)][0],
                                out.keypoints.points[static_cast<size_t>(idx)][1] - rise});
        fill_polygon(img, convex_hull(hull_pts), style.skin);
    }
    std::array<double, 3> dark = {0.07, 0.07, 0.09};
    // Brow and nose shades stay above the detector threshold so interior
    // strokes can never split the face component.
    std::array<double, 3> shade = with_min_luminance(
        {style.skin[0] * 0.72, style.skin[1] * 0.72, style.skin[2] * 0.72}, 0.42);
    fill_polygon(img, ring(out.keypoints, 36, 41), dark);   // eyes
    fill_polygon(img, ring(out.keypoints, 42, 47), dark);
    fill_polygon(img, ring(out.keypoints, 48, 59), style.lips);  // mouth
    stroke(img, out.keypoints, 17, 21, false, shade, 2);    // brows
    stroke(img, out.keypoints, 22, 26, false, shade, 2);
    stroke(img, out.keypoints, 27, 30, false, shade);       // nose
    stroke(img, out.keypoints, 31, 35, false, shade);
    out.image = std::move(img);
    return out;
}

std::vector<FixtureFace> make_identity_group(const MorphableModel& model, uint64_t id_seed,
                                             int count, int image_size, uint64_t variation_seed,
                                             double face_frac) {
    IdentityStyle style = identity_style(id_seed);
    Rng rng(variation_seed);
    std::vector<FixtureFace> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        MorphParams p = sample_face_params(model, id_seed, rng, image_size, face_frac);
        out.push_back(render_fixture_face(model, p, style, image_size, image_size));
    }
    return out;
}

void write_fixture_files(const std::string& dir, const std::string& stem, const FixtureFace& face,
                         const FixtureMeta& meta) {
    fs::create_directories(dir);
    std::string base = dir + "/" + stem;
    write_png(base + ".png", face.image);
    json kps = json::object();
    kps["points"] = json::array();
    for (auto& p : face.keypoints.points) kps["points"].push_back({p[0], p[1]});
    std::ofstream(base + ".kps.json") << kps.dump();
    json mj;
    mj["claimed_id"] = meta.claimed_id;
    mj["source"] = meta.source;
    mj["description"] = meta.description;
    mj["watermark"] = meta.watermark;
    if (meta.quality_override) mj["quality_override"] = *meta.quality_override;
    mj["hair"] = meta.hair_name;
    mj["background"] = meta.background_name;
    mj["gender"] = meta.gender;
    mj["age"] = meta.age;
    std::ofstream(base + ".meta.json") << mj.dump();
}

static std::string sidecar_path(const std::string& png_path, const std::string& ext) {
    std::string stem = png_path;
    if (stem.size() > 4 && stem.substr(stem.size() - 4) == ".png") stem.resize(stem.size() - 4);
    return stem + ext;
}

std::optional<FixtureMeta> read_fixture_meta(const std::string& png_path) {
    std::ifstream in(sidecar_path(png_path, ".meta.json"));
    if (!in) return std::nullopt;
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    FixtureMeta m;
    m.claimed_id = j.value("claimed_id", "");
    m.source = j.value("source", "fixture");
    m.description = j.value("description", "");
    m.watermark = j.value("watermark", false);
    if (j.contains("quality_override")) m.quality_override = j["quality_override"].get<double>();
    m.hair_name = j.value("hair", "");
    m.background_name = j.value("background", "");
    m.gender = j.value("gender", "");
    m.age = j.value("age", 0);
    return m;
}

std::optional<Keypoints2D> read_fixture_keypoints(const std::string& png_path) {
    std::ifstream in(sidecar_path(png_path, ".kps.json"));
    if (!in) return std::nullopt;
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.contains("points")) return std::nullopt;
    Keypoints2D k;
    for (auto& p : j["points"]) k.points.push_back({p[0].get<double>(), p[1].get<double>()});
    return k;
}

PlantedViolations make_pipeline_corpus(const CorpusPlan& plan) {
    MorphableModel model = make_toy_morphable_model();
    fs::create_directories(plan.dir);
    PlantedViolations planted;
    Rng rng(plan.seed);
    int written = 0;
    for (int id = 0; id < plan.identities; ++id) {
        uint64_t id_seed = plan.seed * 1000 + static_cast<uint64_t>(id);
        IdentityStyle style = identity_style(id_seed);
        for (int i = 0; i < plan.images_per_identity; ++i) {
            std::string stem = "id" + std::to_string(id) + "_" + std::to_string(i);
            FixtureMeta meta;
            meta.claimed_id = "person_" + std::to_string(id);
            meta.description = "a clear portrait photo";
            meta.hair_name = style.hair_name;
            meta.background_name = style.background_name;
            meta.gender = style.gender;
            meta.age = style.age;
            int size = plan.image_size;
            double face_frac = 0.6;
            uint64_t face_id_seed = id_seed;

            // Planted violations live in identity 0's later slots and one
            // outlier inside identity 1.
            bool two_faces = (id == 0 && i == 1);
            if (id == 0 && i == 2) face_frac = 0.22;          // square face box ~9% of the crop
            if (id == 0 && i == 3) size = 255;                // below the 256px floor
            if (id == 0 && i == 4) meta.quality_override = 0.449;
            if (id == 0 && i == 5) meta.description = "a person holding a microphone";
            if (id == 1 && i == 5) face_id_seed = plan.seed * 1000 + 777;  // identity outlier

            MorphParams p = sample_face_params(model, face_id_seed, rng, size, face_frac);
            IdentityStyle face_style = identity_style(face_id_seed);
            FixtureFace face = render_fixture_face(model, p, face_style, size, size);
            if (two_faces) {
                // Two well-separated faces so detection reports exactly two.
                MorphParams p2 = sample_face_params(model, face_id_seed + 5, rng, size, 0.26);
                p2.pose.rotation = {0, 0, 0};
                p2.pose.translation = {size * 0.22, size * 0.22};
                p.pose.scale = 0.33 * size / 1.9;
                p.pose.rotation = {0, 0, 0};
                p.pose.translation = {size * 0.7, size * 0.7};
                FixtureFace f1 = render_fixture_face(model, p, face_style, size, size);
                FixtureFace f2 = render_fixture_face(model, p2, identity_style(face_id_seed + 5),
                                                     size, size);
                // Composite: overlay the second face's bright region.
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        double lum = f2.image.luminance(y, x);
                        if (lum > 0.3)
                            for (int c = 0; c < 3; ++c) f1.image.at(y, x, c) = f2.image.at(y, x, c);
                    }
                face = std::move(f1);
            }
            write_fixture_files(plan.dir, stem, face, meta);
            written++;
            std::string path = plan.dir + "/" + stem + ".png";
            if (two_faces) planted.two_faces = path;
            if (id == 0 && i == 2) planted.small_area = path;
            if (id == 0 && i == 3) planted.small_image = path;
            if (id == 0 && i == 4) planted.low_quality = path;
            if (id == 0 && i == 5) planted.occluded = path;
            if (id == 1 && i == 5) planted.outlier = path;
        }
    }
    // Top up to 30 images with an extra identity if the plan fell short.
    int extra_id = plan.identities;
    while (written < 30) {
        uint64_t id_seed = plan.seed * 1000 + static_cast<uint64_t>(extra_id);
        IdentityStyle style = identity_style(id_seed);
        std::string stem = "id" + std::to_string(extra_id) + "_" + std::to_string(written);
        FixtureMeta meta;
        meta.claimed_id = "person_" + std::to_string(extra_id);
        meta.description = "a clear portrait photo";
        meta.hair_name = style.hair_name;
        meta.background_name = style.background_name;
        meta.gender = style.gender;
        meta.age = style.age;
        MorphParams p = sample_face_params(model, id_seed, rng, plan.image_size, 0.6);
        write_fixture_files(plan.dir, stem,
                            render_fixture_face(model, p, style, plan.image_size, plan.image_size),
                            meta);
        written++;
    }
    return planted;
}

std::vector<std::string> write_identity_group(const std::string& dir, const MorphableModel& model,
                                              uint64_t id_seed, int count, int image_size,
                                              uint64_t variation_seed) {
    IdentityStyle style = identity_style(id_seed);
    std::vector<FixtureFace> faces =
        make_identity_group(model, id_seed, count, image_size, variation_seed);
    std::vector<std::string> paths;
    for (int i = 0; i < count; ++i) {
        std::string stem = "face_" + std::to_string(i);
        FixtureMeta meta;
        meta.claimed_id = "id_" + std::to_string(id_seed);
        meta.description = "a clear portrait photo";
        meta.hair_name = style.hair_name;
        meta.background_name = style.background_name;
        meta.gender = style.gender;
        meta.age = style.age;
        write_fixture_files(dir, stem, faces[static_cast<size_t>(i)], meta);
        paths.push_back(dir + "/" + stem + ".png");
    }
    return paths;
}

}  // namespace portrait
