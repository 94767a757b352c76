#include "portrait/morphable.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "portrait/errors.hpp"

namespace portrait {

std::array<double, 9> rodrigues(const std::array<double, 3>& aa) {
    double theta = std::sqrt(aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]);
    std::array<double, 9> r = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    if (theta < 1e-14) return r;
    double kx = aa[0] / theta, ky = aa[1] / theta, kz = aa[2] / theta;
    double c = std::cos(theta), s = std::sin(theta), v = 1.0 - c;
    r = {c + kx * kx * v,      kx * ky * v - kz * s, kx * kz * v + ky * s,
         ky * kx * v + kz * s, c + ky * ky * v,      ky * kz * v - kx * s,
         kz * kx * v - ky * s, kz * ky * v + kx * s, c + kz * kz * v};
    return r;
}

static std::array<double, 3> axis_angle_from_matrix(const Eigen::Matrix3d& R) {
    double tr = R.trace();
    double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    double theta = std::acos(c);
    if (theta < 1e-12) return {0, 0, 0};
    if (theta > M_PI - 1e-6) {
        // Near pi: axis from the symmetric part.
        Eigen::Matrix3d S = (R + Eigen::Matrix3d::Identity()) * 0.5;
        Eigen::Vector3d axis(std::sqrt(std::max(0.0, S(0, 0))), std::sqrt(std::max(0.0, S(1, 1))),
                             std::sqrt(std::max(0.0, S(2, 2))));
        // Fix signs using the off-diagonal terms.
        int m = 0;
        if (axis(1) > axis(m)) m = 1;
        if (axis(2) > axis(m)) m = 2;
        if (m == 0) {
            axis(1) = std::copysign(axis(1), S(0, 1));
            axis(2) = std::copysign(axis(2), S(0, 2));
        } else if (m == 1) {
            axis(0) = std::copysign(axis(0), S(0, 1));
            axis(2) = std::copysign(axis(2), S(1, 2));
        } else {
            axis(0) = std::copysign(axis(0), S(0, 2));
            axis(1) = std::copysign(axis(1), S(1, 2));
        }
        axis.normalize();
        return {theta * axis(0), theta * axis(1), theta * axis(2)};
    }
    double f = theta / (2.0 * std::sin(theta));
    return {f * (R(2, 1) - R(1, 2)), f * (R(0, 2) - R(2, 0)), f * (R(1, 0) - R(0, 1))};
}

Tensor synth_shape(const MorphableModel& model, const MorphParams& params) {
    if (params.alpha.numel() != model.n_id || params.beta.numel() != model.n_exp)
        raise(ErrorCode::DimensionMismatch, "synth_shape: coefficient sizes");
    Tensor v = model.mean_shape;
    for (int k = 0; k < model.K; ++k)
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int j = 0; j < model.n_id; ++j)
                acc += params.alpha.data[j] * model.id_basis.at3(k, c, j);
            for (int l = 0; l < model.n_exp; ++l)
                acc += params.beta.data[l] * model.exp_basis.at3(k, c, l);
            v.at2(k, c) += acc;
        }
    return v;
}

Keypoints2D project_shape(const Tensor& vertices, const Pose& pose) {
    auto r = rodrigues(pose.rotation);
    Keypoints2D out;
    const int k = vertices.dim(0);
    out.points.resize(k);
    for (int i = 0; i < k; ++i) {
        double x = vertices.at2(i, 0), y = vertices.at2(i, 1), z = vertices.at2(i, 2);
        double rx = r[0] * x + r[1] * y + r[2] * z;
        double ry = r[3] * x + r[4] * y + r[5] * z;
        out.points[i] = {pose.scale * rx + pose.translation[0],
                         pose.scale * ry + pose.translation[1]};
    }
    return out;
}

MorphParams compose_params(const MorphParams& ref, const MorphParams& tgt) {
    MorphParams out;
    out.alpha = ref.alpha;
    out.beta = tgt.beta;
    out.pose = tgt.pose;
    return out;
}

namespace {

double reproj_rmse(const Keypoints2D& pred, const Keypoints2D& obs) {
    double acc = 0.0;
    for (size_t i = 0; i < obs.points.size(); ++i) {
        double dx = pred.points[i][0] - obs.points[i][0];
        double dy = pred.points[i][1] - obs.points[i][1];
        acc += dx * dx + dy * dy;
    }
    return std::sqrt(acc / static_cast<double>(obs.points.size()));
}

// Scaled-orthographic pose from 2-D correspondences: linear solve for the two
// projection rows, nearest rotation by SVD, then exact scale/translation given
// the rotation.
Pose solve_pose(const Tensor& verts, const Keypoints2D& pts) {
    const int k = verts.dim(0);
    Eigen::MatrixXd M(k, 4);
    Eigen::VectorXd px(k), py(k);
    for (int i = 0; i < k; ++i) {
        M(i, 0) = verts.at2(i, 0);
        M(i, 1) = verts.at2(i, 1);
        M(i, 2) = verts.at2(i, 2);
        M(i, 3) = 1.0;
        px(i) = pts.points[i][0];
        py(i) = pts.points[i][1];
    }
    Eigen::Matrix<double, 4, 1> u = M.colPivHouseholderQr().solve(px);
    Eigen::Matrix<double, 4, 1> w = M.colPivHouseholderQr().solve(py);
    Eigen::Vector3d a = u.head<3>(), b = w.head<3>();
    double na = a.norm(), nb = b.norm();
    if (na < 1e-12 || nb < 1e-12) raise(ErrorCode::DegenerateInput, "pose solve collapsed");
    Eigen::Matrix3d m3;
    m3.row(0) = (a / na).transpose();
    m3.row(1) = (b / nb).transpose();
    m3.row(2) = (a / na).cross(b / nb).transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m3, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d R = svd.matrixU() * svd.matrixV().transpose();
    if (R.determinant() < 0) {
        Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
        flip(2, 2) = -1.0;
        R = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    // Optimal scale / translation for this rotation (centered least squares).
    Eigen::MatrixXd q(k, 2);
    for (int i = 0; i < k; ++i) {
        Eigen::Vector3d v(verts.at2(i, 0), verts.at2(i, 1), verts.at2(i, 2));
        Eigen::Vector3d rv = R * v;
        q(i, 0) = rv(0);
        q(i, 1) = rv(1);
    }
    Eigen::RowVector2d qbar = q.colwise().mean();
    double pxbar = px.mean(), pybar = py.mean();
    double num = 0.0, den = 0.0;
    for (int i = 0; i < k; ++i) {
        double qx = q(i, 0) - qbar(0), qy = q(i, 1) - qbar(1);
        num += qx * (px(i) - pxbar) + qy * (py(i) - pybar);
        den += qx * qx + qy * qy;
    }
    double s = den > 1e-300 ? num / den : 1e-9;
    if (s <= 1e-12) s = 1e-9;  // scale must stay positive; RMSE guard rejects bad steps
    Pose pose;
    pose.rotation = axis_angle_from_matrix(R);
    pose.scale = s;
    pose.translation = {pxbar - s * qbar(0), pybar - s * qbar(1)};
    return pose;
}

// Ridge least squares for (alpha, beta) with the pose fixed.
void solve_coeffs(const MorphableModel& model, const Pose& pose, const Keypoints2D& pts, double mu,
                  Tensor& alpha, Tensor& beta) {
    const int k = model.K;
    const int n = model.n_id + model.n_exp;
    auto r = rodrigues(pose.rotation);
    Eigen::MatrixXd A(2 * k, n);
    Eigen::VectorXd rhs(2 * k);
    for (int i = 0; i < k; ++i) {
        double mx = model.mean_shape.at2(i, 0), my = model.mean_shape.at2(i, 1),
               mz = model.mean_shape.at2(i, 2);
        double qx = r[0] * mx + r[1] * my + r[2] * mz;
        double qy = r[3] * mx + r[4] * my + r[5] * mz;
        rhs(2 * i) = pts.points[i][0] - pose.scale * qx - pose.translation[0];
        rhs(2 * i + 1) = pts.points[i][1] - pose.scale * qy - pose.translation[1];
        for (int j = 0; j < n; ++j) {
            double bx, by, bz;
            if (j < model.n_id) {
                bx = model.id_basis.at3(i, 0, j);
                by = model.id_basis.at3(i, 1, j);
                bz = model.id_basis.at3(i, 2, j);
            } else {
                bx = model.exp_basis.at3(i, 0, j - model.n_id);
                by = model.exp_basis.at3(i, 1, j - model.n_id);
                bz = model.exp_basis.at3(i, 2, j - model.n_id);
            }
            A(2 * i, j) = pose.scale * (r[0] * bx + r[1] * by + r[2] * bz);
            A(2 * i + 1, j) = pose.scale * (r[3] * bx + r[4] * by + r[5] * bz);
        }
    }
    Eigen::MatrixXd lhs = A.transpose() * A + mu * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd x = lhs.ldlt().solve(A.transpose() * rhs);
    alpha = Tensor::zeros({model.n_id});
    beta = Tensor::zeros({model.n_exp});
    for (int j = 0; j < model.n_id; ++j) alpha.data[j] = x(j);
    for (int l = 0; l < model.n_exp; ++l) beta.data[l] = x(model.n_id + l);
}

double param_delta(const MorphParams& a, const MorphParams& b) {
    double d = 0.0;
    for (int i = 0; i < a.alpha.numel(); ++i)
        d = std::max(d, std::fabs(a.alpha.data[i] - b.alpha.data[i]));
    for (int i = 0; i < a.beta.numel(); ++i)
        d = std::max(d, std::fabs(a.beta.data[i] - b.beta.data[i]));
    for (int i = 0; i < 3; ++i)
        d = std::max(d, std::fabs(a.pose.rotation[i] - b.pose.rotation[i]));
    d = std::max(d, std::fabs(a.pose.scale - b.pose.scale));
    for (int i = 0; i < 2; ++i)
        d = std::max(d, std::fabs(a.pose.translation[i] - b.pose.translation[i]));
    return d;
}

}  // namespace

FitResult fit_morphable(const Keypoints2D& kps, const MorphableModel& model,
                        const FitOptions& opts) {
    const int k = model.K;
    if (kps.size() != k) raise(ErrorCode::DimensionMismatch, "fit: keypoint count != K");
    if (k < 4) raise(ErrorCode::DegenerateInput, "fit: need at least 4 points");
    // Collinearity check on the 2-D scatter.
    double mx = 0, my = 0;
    for (auto& p : kps.points) {
        mx += p[0];
        my += p[1];
    }
    mx /= k;
    my /= k;
    double sxx = 0, sxy = 0, syy = 0;
    for (auto& p : kps.points) {
        sxx += (p[0] - mx) * (p[0] - mx);
        sxy += (p[0] - mx) * (p[1] - my);
        syy += (p[1] - my) * (p[1] - my);
    }
    double tr = sxx + syy, det = sxx * syy - sxy * sxy;
    double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    double lam_min = tr / 2.0 - disc;
    if (lam_min <= 1e-9 * std::max(1.0, tr)) raise(ErrorCode::DegenerateInput, "fit: collinear points");

    FitResult res;
    res.params.alpha = Tensor::zeros({model.n_id});
    res.params.beta = Tensor::zeros({model.n_exp});
    Tensor verts = synth_shape(model, res.params);
    res.params.pose = solve_pose(verts, kps);
    res.reproj_rmse = reproj_rmse(project_shape(verts, res.params.pose), kps);
    res.rmse_history.push_back(res.reproj_rmse);

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        MorphParams prev = res.params;
        // (b) shape with pose fixed
        Tensor alpha2, beta2;
        solve_coeffs(model, res.params.pose, kps, opts.mu, alpha2, beta2);
        MorphParams cand = res.params;
        cand.alpha = alpha2;
        cand.beta = beta2;
        Tensor verts2 = synth_shape(model, cand);
        double r2 = reproj_rmse(project_shape(verts2, cand.pose), kps);
        if (r2 <= res.reproj_rmse) {
            res.params = cand;
            verts = std::move(verts2);
            res.reproj_rmse = r2;
        }
        // (a) pose with shape fixed
        Pose pose2 = solve_pose(verts, kps);
        MorphParams cand2 = res.params;
        cand2.pose = pose2;
        double r3 = reproj_rmse(project_shape(verts, pose2), kps);
        if (r3 <= res.reproj_rmse) {
            res.params = cand2;
            res.reproj_rmse = r3;
        }
        res.rmse_history.push_back(res.reproj_rmse);
        res.iters = iter + 1;
        if (param_delta(prev, res.params) < opts.tol) break;
    }
    return res;
}

namespace {
void plot(ImageTensor& img, long x, long y, const std::array<double, 3>& color) {
    if (y < 0 || y >= img.height || x < 0 || x >= img.width) return;
    img.at(static_cast<int>(y), static_cast<int>(x), 0) = color[0];
    img.at(static_cast<int>(y), static_cast<int>(x), 1) = color[1];
    img.at(static_cast<int>(y), static_cast<int>(x), 2) = color[2];
}

// Bresenham with integer endpoints; plots both ends.
void draw_line(ImageTensor& img, long x0, long y0, long x1, long y1,
               const std::array<double, 3>& color) {
    long dx = std::labs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    long dy = -std::labs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
        plot(img, x0, y0, color);
        if (x0 == x1 && y0 == y1) break;
        long e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}
}  // namespace

ImageTensor render_landmarks(const Keypoints2D& kps, const MorphableModel& model, int height,
                             int width) {
    ImageTensor img(height, width);
    for (const ContourLine& line : model.topology) {
        const auto& color = kRegionColors[static_cast<size_t>(line.color_id) % kRegionColors.size()];
        if (line.indices.size() == 1) {
            const auto& p = kps.points[static_cast<size_t>(line.indices[0])];
            plot(img, std::llround(p[0]), std::llround(p[1]), color);
            continue;
        }
        for (size_t i = 0; i + 1 < line.indices.size(); ++i) {
            const auto& p0 = kps.points[static_cast<size_t>(line.indices[i])];
            const auto& p1 = kps.points[static_cast<size_t>(line.indices[i + 1])];
            draw_line(img, std::llround(p0[0]), std::llround(p0[1]), std::llround(p1[0]),
                      std::llround(p1[1]), color);
        }
    }
    return img;
}

ImageTensor render_keypoints5(const Keypoints2D& kps, int height, int width) {
    ImageTensor img(height, width);
    std::vector<std::pair<std::array<double, 2>, int>> dots;
    if (kps.size() >= 68) {
        auto mean_of = [&](int lo, int hi) {
            std::array<double, 2> m = {0, 0};
            for (int i = lo; i <= hi; ++i) {
                m[0] += kps.points[static_cast<size_t>(i)][0];
                m[1] += kps.points[static_cast<size_t>(i)][1];
            }
            m[0] /= (hi - lo + 1);
            m[1] /= (hi - lo + 1);
            return m;
        };
        dots = {{mean_of(36, 41), 3}, {mean_of(42, 47), 3}, {kps.points[30], 2},
                {kps.points[48], 4}, {kps.points[54], 4}};
    } else {
        for (int i = 0; i < std::min(5, kps.size()); ++i) dots.push_back({kps.points[static_cast<size_t>(i)], i % 5});
    }
    for (auto& [p, color_id] : dots) {
        long cx = std::llround(p[0]), cy = std::llround(p[1]);
        for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx)
                plot(img, cx + dx, cy + dy, kRegionColors[static_cast<size_t>(color_id)]);
    }
    return img;
}

void FixtureKeypointExtractor::register_image(const ImageTensor& image, Keypoints2D kps) {
    registry_[image.content_key()] = std::move(kps);
}

std::optional<Keypoints2D> FixtureKeypointExtractor::extract(const ImageTensor& image) const {
    auto it = registry_.find(image.content_key());
    if (it == registry_.end()) return std::nullopt;
    return it->second;
}

std::optional<Keypoints2D> DetectorKeypointExtractor::extract(const ImageTensor& image) const {
    std::vector<FaceCrop> crops = backend_->detect(image);
    if (crops.empty()) return std::nullopt;
    const FaceCrop& crop = crops.front();
    // Frontal mean-shape template scaled into the detected box.
    MorphParams neutral;
    neutral.alpha = Tensor::zeros({model_->n_id});
    neutral.beta = Tensor::zeros({model_->n_exp});
    Tensor verts = synth_shape(*model_, neutral);
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    for (int i = 0; i < model_->K; ++i) {
        min_x = std::min(min_x, verts.at2(i, 0));
        max_x = std::max(max_x, verts.at2(i, 0));
        min_y = std::min(min_y, verts.at2(i, 1));
        max_y = std::max(max_y, verts.at2(i, 1));
    }
    double span = std::max(max_x - min_x, max_y - min_y);
    Pose pose;
    pose.scale = 0.8 * crop.w / std::max(span, 1e-9);
    pose.translation = {crop.x + crop.w / 2.0 - pose.scale * (min_x + max_x) / 2.0,
                        crop.y + crop.h / 2.0 - pose.scale * (min_y + max_y) / 2.0};
    return project_shape(verts, pose);
}

ImageTensor generate_landmark(const ImageTensor& ref_image, const ImageTensor& tgt_image,
                              const MorphableModel& model, const KeypointExtractor& extractor,
                              int height, int width) {
    auto ref_kps = extractor.extract(ref_image);
    if (!ref_kps) raise(ErrorCode::NoFaceFound, "landmark generator: reference image", 0);
    auto tgt_kps = extractor.extract(tgt_image);
    if (!tgt_kps) raise(ErrorCode::NoFaceFound, "landmark generator: target image", 1);
    FitResult ref_fit = fit_morphable(*ref_kps, model);
    FitResult tgt_fit = fit_morphable(*tgt_kps, model);
    MorphParams combined = compose_params(ref_fit.params, tgt_fit.params);
    Keypoints2D kps = project_shape(synth_shape(model, combined), combined.pose);
    return render_landmarks(kps, model, height, width);
}

// ---------------------------------------------------------------------------
// Fixture file I/O
// ---------------------------------------------------------------------------

namespace {
const char kMagic[5] = {'H', 'F', 'P', 'M', '1'};

void write_i32(FILE* f, int32_t v) { std::fwrite(&v, 4, 1, f); }
void write_f64s(FILE* f, const Tensor& t) {
    std::fwrite(t.data.data(), 8, t.data.size(), f);
}
int32_t read_i32(FILE* f) {
    int32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) raise(ErrorCode::IOFailure, "model file truncated");
    return v;
}
void read_f64s(FILE* f, Tensor& t) {
    if (std::fread(t.data.data(), 8, t.data.size(), f) != t.data.size())
        raise(ErrorCode::IOFailure, "model file truncated");
}

int color_for_list(int index, int n_lists) {
    // Canonical 68-point layout uses nine lists: jaw, two brows, nose bridge,
    // nostrils, two eyes, outer and inner mouth.
    static const int canonical[9] = {0, 1, 1, 2, 2, 3, 3, 4, 4};
    if (n_lists == 9) return canonical[index];
    return index % 5;
}
}  // namespace

void save_morphable_model(const std::string& path, const MorphableModel& model) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) raise(ErrorCode::IOFailure, "cannot write model: " + path);
    std::fwrite(kMagic, 1, 5, f);
    write_i32(f, model.K);
    write_i32(f, model.n_id);
    write_i32(f, model.n_exp);
    write_f64s(f, model.mean_shape);
    write_f64s(f, model.id_basis);
    write_f64s(f, model.exp_basis);
    write_i32(f, static_cast<int32_t>(model.topology.size()));
    for (const ContourLine& line : model.topology) {
        write_i32(f, static_cast<int32_t>(line.indices.size()));
        for (int idx : line.indices) write_i32(f, idx);
    }
    std::fclose(f);
}

MorphableModel load_morphable_model(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) raise(ErrorCode::IOFailure, "cannot read model: " + path);
    char magic[5];
    if (std::fread(magic, 1, 5, f) != 5 || std::memcmp(magic, kMagic, 5) != 0) {
        std::fclose(f);
        raise(ErrorCode::IOFailure, "bad model magic: " + path);
    }
    MorphableModel m;
    m.K = read_i32(f);
    m.n_id = read_i32(f);
    m.n_exp = read_i32(f);
    m.mean_shape = Tensor::zeros({m.K, 3});
    m.id_basis = Tensor::zeros({m.K, 3, m.n_id});
    m.exp_basis = Tensor::zeros({m.K, 3, m.n_exp});
    read_f64s(f, m.mean_shape);
    read_f64s(f, m.id_basis);
    read_f64s(f, m.exp_basis);
    int n_lists = read_i32(f);
    for (int i = 0; i < n_lists; ++i) {
        ContourLine line;
        int len = read_i32(f);
        line.indices.resize(static_cast<size_t>(len));
        for (int j = 0; j < len; ++j) {
            line.indices[static_cast<size_t>(j)] = read_i32(f);
            if (line.indices[static_cast<size_t>(j)] >= m.K)
                raise(ErrorCode::IOFailure, "topology index out of range");
        }
        line.color_id = color_for_list(i, n_lists);
        m.topology.push_back(std::move(line));
    }
    std::fclose(f);
    return m;
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

namespace {
std::vector<int> range_list(int lo, int hi, bool closed) {
    std::vector<int> v;
    for (int i = lo; i <= hi; ++i) v.push_back(i);
    if (closed) v.push_back(lo);
    return v;
}
}  // namespace

MorphableModel make_toy_morphable_model(int n_id, int n_exp, uint64_t seed) {
    MorphableModel m;
    m.K = 68;
    m.n_id = n_id;
    m.n_exp = n_exp;
    m.mean_shape = Tensor::zeros({68, 3});
    auto set = [&](int i, double x, double y, double z) {
        m.mean_shape.at2(i, 0) = x;
        m.mean_shape.at2(i, 1) = y;
        m.mean_shape.at2(i, 2) = z;
    };
    // +y points down (image convention); +z toward the camera.
    for (int i = 0; i <= 16; ++i) {  // jaw arc, ear to ear through the chin
        double u = i / 16.0;
        double ang = M_PI * (1.0 - u);
        set(i, 0.95 * std::cos(ang) * -1.0, 0.85 * std::sin(ang) + 0.05, -0.15 * std::sin(ang));
    }
    for (int i = 0; i < 5; ++i) {  // brows
        double u = i / 4.0;
        set(17 + i, -0.65 + 0.4 * u, -0.42 - 0.08 * std::sin(M_PI * u), 0.12);
        set(22 + i, 0.25 + 0.4 * u, -0.50 + 0.08 * std::sin(M_PI * u) * -1.0 + 0.08, 0.12);
    }
    for (int i = 0; i < 4; ++i) set(27 + i, 0.0, -0.28 + 0.14 * i, 0.18 + 0.09 * i);  // nose bridge
    for (int i = 0; i < 5; ++i) set(31 + i, -0.14 + 0.07 * i, 0.22, 0.30);            // nostrils
    for (int i = 0; i < 6; ++i) {  // eyes (hexagonal rings)
        double ang = 2.0 * M_PI * i / 6.0;
        set(36 + i, -0.45 + 0.16 * std::cos(ang), -0.25 + 0.07 * std::sin(ang), 0.06);
        set(42 + i, 0.45 + 0.16 * std::cos(ang), -0.25 + 0.07 * std::sin(ang), 0.06);
    }
    for (int i = 0; i < 12; ++i) {  // outer mouth
        double ang = 2.0 * M_PI * i / 12.0;
        set(48 + i, 0.30 * std::cos(ang), 0.48 + 0.13 * std::sin(ang), 0.10);
    }
    for (int i = 0; i < 8; ++i) {  // inner mouth
        double ang = 2.0 * M_PI * i / 8.0;
        set(60 + i, 0.17 * std::cos(ang), 0.48 + 0.05 * std::sin(ang), 0.10);
    }

    // Orthonormal random bases over R^(3K), identity and expression jointly.
    Rng rng(seed);
    int total = n_id + n_exp;
    std::vector<std::vector<double>> rows(static_cast<size_t>(total),
                                          std::vector<double>(static_cast<size_t>(m.K * 3)));
    for (auto& row : rows)
        for (auto& x : row) x = rng.normal();
    for (int i = 0; i < total; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (size_t t = 0; t < rows[i].size(); ++t) dot += rows[static_cast<size_t>(i)][t] * rows[static_cast<size_t>(j)][t];
            for (size_t t = 0; t < rows[i].size(); ++t) rows[static_cast<size_t>(i)][t] -= dot * rows[static_cast<size_t>(j)][t];
        }
        double nrm = 0.0;
        for (double x : rows[static_cast<size_t>(i)]) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (double& x : rows[static_cast<size_t>(i)]) x /= nrm;
    }
    m.id_basis = Tensor::zeros({m.K, 3, n_id});
    m.exp_basis = Tensor::zeros({m.K, 3, n_exp});
    for (int j = 0; j < n_id; ++j)
        for (int k = 0; k < m.K; ++k)
            for (int c = 0; c < 3; ++c)
                m.id_basis.at3(k, c, j) = rows[static_cast<size_t>(j)][static_cast<size_t>(k * 3 + c)];
    for (int l = 0; l < n_exp; ++l)
        for (int k = 0; k < m.K; ++k)
            for (int c = 0; c < 3; ++c)
                m.exp_basis.at3(k, c, l) = rows[static_cast<size_t>(n_id + l)][static_cast<size_t>(k * 3 + c)];

    m.topology = {
        {range_list(0, 16, false), 0},   // jaw
        {range_list(17, 21, false), 1},  // right brow
        {range_list(22, 26, false), 1},  // left brow
        {range_list(27, 30, false), 2},  // nose bridge
        {range_list(31, 35, false), 2},  // nostrils
        {range_list(36, 41, true), 3},   // right eye
        {range_list(42, 47, true), 3},   // left eye
        {range_list(48, 59, true), 4},   // outer mouth
        {range_list(60, 67, true), 4},   // inner mouth
    };
    return m;
}

}  // namespace portrait
