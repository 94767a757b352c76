#include "portrait/encoders.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include <json.hpp>

#include "portrait/errors.hpp"
#include "portrait/rng.hpp"

namespace portrait {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// ToyBackend
// ---------------------------------------------------------------------------

ToyBackend::ToyBackend(ToyBackendConfig cfg) : cfg_(cfg) {
    Rng rng(cfg_.seed);
    double s1 = 1.0 / std::sqrt(5.0);
    w_local_ = Tensor::randn({5, cfg_.d1}, rng, s1);
    b_local_ = Tensor::randn({cfg_.d1}, rng, 0.1);
    w_cls_ = Tensor::randn({3, cfg_.d1}, rng, 1.0 / std::sqrt(3.0));
    w_global_ = Tensor::randn({192, cfg_.d2}, rng, 1.0 / std::sqrt(192.0));
}

namespace {

struct Component {
    int min_x, min_y, max_x, max_y;
    int64_t count;
    double lum_sum;
};

// Square crop of side `side` centered on (cx, cy), shifted to stay inside.
void square_region(int cx, int cy, int side, int img_w, int img_h, int& x0, int& y0, int& s) {
    s = std::min(side, std::min(img_w, img_h));
    x0 = std::clamp(cx - s / 2, 0, img_w - s);
    y0 = std::clamp(cy - s / 2, 0, img_h - s);
}

}  // namespace

std::vector<FaceCrop> ToyBackend::detect(const ImageTensor& image) const {
    const ImageTensor img = matting(image);
    const int h = img.height, w = img.width;
    std::vector<int> label(static_cast<size_t>(h) * w, -1);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t idx = static_cast<size_t>(y) * w + x;
            if (label[idx] >= 0 || img.luminance(y, x) <= cfg_.detect_threshold) continue;
            int id = static_cast<int>(comps.size());
            comps.push_back({x, y, x, y, 0, 0.0});
            stack.clear();
            stack.push_back(static_cast<int>(idx));
            label[idx] = id;
            while (!stack.empty()) {
                int cur = stack.back();
                stack.pop_back();
                int cy = cur / w, cx = cur % w;
                Component& c = comps[id];
                c.min_x = std::min(c.min_x, cx);
                c.max_x = std::max(c.max_x, cx);
                c.min_y = std::min(c.min_y, cy);
                c.max_y = std::max(c.max_y, cy);
                c.count++;
                c.lum_sum += img.luminance(cy, cx);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        size_t nidx = static_cast<size_t>(ny) * w + nx;
                        if (label[nidx] >= 0 || img.luminance(ny, nx) <= cfg_.detect_threshold)
                            continue;
                        label[nidx] = id;
                        stack.push_back(static_cast<int>(nidx));
                    }
            }
        }
    }
    std::vector<FaceCrop> crops;
    for (const Component& c : comps) {
        if (c.count < cfg_.detect_min_pixels) continue;
        int bw = c.max_x - c.min_x + 1;
        int bh = c.max_y - c.min_y + 1;
        int x0, y0, s;
        square_region((c.min_x + c.max_x + 1) / 2, (c.min_y + c.max_y + 1) / 2, std::max(bw, bh),
                      w, h, x0, y0, s);
        FaceCrop crop;
        crop.image = image.crop(x0, y0, s, s);
        crop.x = x0;
        crop.y = y0;
        crop.w = s;
        crop.h = s;
        crop.detector_score = std::clamp(c.lum_sum / static_cast<double>(c.count), 0.0, 1.0);
        crops.push_back(std::move(crop));
    }
    std::stable_sort(crops.begin(), crops.end(), [](const FaceCrop& a, const FaceCrop& b) {
        if (a.detector_score != b.detector_score) return a.detector_score > b.detector_score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });
    return crops;
}

namespace {
// Cell boundaries shared with Graph::grid_pool: floor split with a 1-pixel
// minimum so small crops still populate every cell.
void cell_range(int i, int n, int g, int& lo, int& hi) {
    lo = static_cast<int>(static_cast<int64_t>(i) * n / g);
    hi = static_cast<int>(static_cast<int64_t>(i + 1) * n / g);
    if (hi <= lo) hi = lo + 1;
    if (lo >= n) lo = n - 1;
    if (hi > n) hi = n;
}

void cell_mean(const ImageTensor& img, int i, int j, int g, double out[3]) {
    int y0, y1, x0, x1;
    cell_range(i, img.height, g, y0, y1);
    cell_range(j, img.width, g, x0, x1);
    out[0] = out[1] = out[2] = 0.0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c) out[c] += img.at(y, x, c);
    double n = static_cast<double>((y1 - y0) * (x1 - x0));
    for (int c = 0; c < 3; ++c) out[c] /= n;
}
}  // namespace

LocalFeatures ToyBackend::encode_local(const std::vector<FaceCrop>& crops) const {
    const int n = static_cast<int>(crops.size());
    const int t = cfg_.t_local;
    const int d1 = cfg_.d1;
    const int cells = t - 1;
    const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cells))));
    LocalFeatures out;
    out.n = n;
    out.t_local = t;
    out.d1 = d1;
    out.tokens = Tensor::zeros({n, t, d1});
    for (int r = 0; r < n; ++r) {
        const ImageTensor& img = crops[r].image;
        // CLS token: projection of the global mean color.
        double mean[3] = {0, 0, 0};
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c);
        for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(img.height) * img.width;
        for (int k = 0; k < d1; ++k) {
            double acc = 0.0;
            for (int c = 0; c < 3; ++c) acc += mean[c] * w_cls_.at2(c, k);
            out.tokens.at3(r, 0, k) = acc;
        }
        // Patch tokens: cell color + normalized position through the fixed map.
        for (int ci = 0; ci < cells; ++ci) {
            int gi = ci / g, gj = ci % g;
            double feat[5];
            cell_mean(img, gi, gj, g, feat);
            feat[3] = (gi + 0.5) / g;
            feat[4] = (gj + 0.5) / g;
            for (int k = 0; k < d1; ++k) {
                double acc = b_local_.data[k];
                for (int f = 0; f < 5; ++f) acc += feat[f] * w_local_.at2(f, k);
                out.tokens.at3(r, 1 + ci, k) = acc;
            }
        }
    }
    return out;
}

V ToyBackend::embed_global_graph(Graph& g, V image_chw) const {
    // Chroma features: rgb minus luminance per pixel. Hue carries the identity
    // signal in the fixture world and is robust to pose and expression, while
    // the shared bright-face / dark-background brightness structure cancels.
    Tensor lum_w = Tensor::zeros({1, 3, 1, 1});
    lum_w.data = {0.299, 0.587, 0.114};
    V lum = g.conv2d(image_chw, g.input(lum_w), g.input(Tensor::zeros({1})), 1, 0);  // 1xHxW
    V lum3 = g.concat_channels(g.concat_channels(lum, lum), lum);
    V chroma = g.sub(image_chw, lum3);
    V pooled = g.grid_pool(chroma, 8);                  // 3 x 8 x 8
    V flat = g.reshape(pooled, {1, 192});
    V w = g.input(w_global_);
    V proj = g.matmul(flat, w);                         // 1 x d2
    V vec = g.reshape(proj, {cfg_.d2});
    return g.l2_normalize(vec);
}

Tensor ToyBackend::embed_global(const ImageTensor& image) const {
    Graph g;
    V x = g.input(image.to_chw());
    V emb = embed_global_graph(g, x);
    return g.val(emb);
}

Tensor ToyBackend::embed_cls(const ImageTensor& image) const {
    double mean[3] = {0, 0, 0};
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) mean[c] += image.at(y, x, c);
    for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(image.height) * image.width;
    Tensor out({cfg_.d1});
    for (int k = 0; k < cfg_.d1; ++k)
        for (int c = 0; c < 3; ++c) out.data[k] += mean[c] * w_cls_.at2(c, k);
    return out;
}

GlobalFeatures ToyBackend::encode_global(const std::vector<FaceCrop>& crops) const {
    const int n = static_cast<int>(crops.size());
    GlobalFeatures out;
    out.n = n;
    out.d2 = cfg_.d2;
    out.embedding = Tensor::zeros({n, 1, cfg_.d2});
    for (int r = 0; r < n; ++r) {
        Tensor e = embed_global(crops[r].image);
        for (int k = 0; k < cfg_.d2; ++k) out.embedding.at3(r, 0, k) = e.data[k];
    }
    return out;
}

TextEmbedding ToyBackend::encode_text(const std::string& text) const {
    if (text.empty()) return TextEmbedding::null_embedding(cfg_.t_text, cfg_.d_text);
    TextEmbedding e;
    e.tokens = Tensor::zeros({cfg_.t_text, cfg_.d_text});
    e.is_null = false;
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    int rows = std::min<int>(cfg_.t_text, static_cast<int>(words.size()));
    for (int i = 0; i < rows; ++i) {
        Rng rng(fnv1a64(words[i].data(), words[i].size(), cfg_.seed ^ 0x9e3779b97f4a7c15ull));
        for (int k = 0; k < cfg_.d_text; ++k)
            e.tokens.at2(i, k) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg_.d_text)));
    }
    return e;
}

double ToyBackend::quality(const ImageTensor& image) const { return sharpness_score(image); }

// ---------------------------------------------------------------------------
// detect_and_crop / encode_references
// ---------------------------------------------------------------------------

FaceCrop detect_and_crop(const ImageTensor& image, const EncoderBackend& backend) {
    std::vector<FaceCrop> crops = backend.detect(image);
    if (crops.empty()) raise(ErrorCode::NoFaceFound, "no face detected");
    // Detect results are sorted by score; argmax with lowest-position tiebreak.
    return crops.front();
}

std::pair<LocalFeatures, GlobalFeatures> encode_references(const std::vector<ImageTensor>& refs,
                                                           const EncoderBackend& backend,
                                                           int n_max) {
    if (refs.empty() || static_cast<int>(refs.size()) > n_max)
        raise(ErrorCode::DimensionMismatch,
              "reference count must be in [1, " + std::to_string(n_max) + "]");
    std::vector<FaceCrop> crops;
    crops.reserve(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) {
        try {
            crops.push_back(detect_and_crop(refs[i], backend));
        } catch (const Error& e) {
            if (e.code() == ErrorCode::NoFaceFound)
                raise(ErrorCode::NoFaceFound, "reference " + std::to_string(i) + ": no face",
                      static_cast<int>(i));
            throw;
        }
    }
    return {backend.encode_local(crops), backend.encode_global(crops)};
}

// ---------------------------------------------------------------------------
// base64
// ---------------------------------------------------------------------------

static const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const unsigned char* data, size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (size_t i = 0; i < len; i += 3) {
        uint32_t v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& s) {
    auto decode_char = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : s) {
        int v = decode_char(c);
        if (v < 0) continue;
        buf = (buf << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// ExternalBackend
// ---------------------------------------------------------------------------

struct ExternalBackend::Proc {
    pid_t pid = -1;
    FILE* to_child = nullptr;
    FILE* from_child = nullptr;

    explicit Proc(const std::string& command) {
        int in_pipe[2], out_pipe[2];
        if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0)
            raise(ErrorCode::IOFailure, "pipe() failed");
        pid = fork();
        if (pid < 0) raise(ErrorCode::IOFailure, "fork() failed");
        if (pid == 0) {
            dup2(in_pipe[0], STDIN_FILENO);
            dup2(out_pipe[1], STDOUT_FILENO);
            close(in_pipe[0]);
            close(in_pipe[1]);
            close(out_pipe[0]);
            close(out_pipe[1]);
            execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            _exit(127);
        }
        close(in_pipe[0]);
        close(out_pipe[1]);
        to_child = fdopen(in_pipe[1], "w");
        from_child = fdopen(out_pipe[0], "r");
        if (!to_child || !from_child) raise(ErrorCode::IOFailure, "fdopen failed");
    }

    ~Proc() {
        if (to_child) fclose(to_child);
        if (from_child) fclose(from_child);
        if (pid > 0) {
            kill(pid, SIGTERM);
            int status = 0;
            waitpid(pid, &status, 0);
        }
    }

    std::string round_trip(const std::string& line) {
        if (fputs(line.c_str(), to_child) == EOF || fputc('\n', to_child) == EOF ||
            fflush(to_child) != 0)
            raise(ErrorCode::IOFailure, "external backend: write failed");
        std::string resp;
        int c;
        while ((c = fgetc(from_child)) != EOF && c != '\n') resp.push_back(static_cast<char>(c));
        if (resp.empty() && c == EOF)
            raise(ErrorCode::IOFailure, "external backend: process closed the stream");
        return resp;
    }
};

ExternalBackend::ExternalBackend(const std::string& command, std::string workdir)
    : proc_(std::make_unique<Proc>(command)), workdir_(std::move(workdir)) {
    std::filesystem::create_directories(workdir_);
}

ExternalBackend::~ExternalBackend() = default;

Tensor ExternalBackend::request_tensor(const std::string& op, const ImageTensor* img,
                                       const std::string* text) const {
    std::lock_guard<std::mutex> lock(mu_);
    json req;
    req["op"] = op;
    std::string img_path;
    if (img) {
        img_path = workdir_ + "/ext_" + std::to_string(getpid()) + "_" +
                   std::to_string(tmp_counter_++) + ".png";
        write_png(img_path, *img);
        req["image_path"] = img_path;
    }
    if (text) req["text"] = *text;
    std::string resp_line = proc_->round_trip(req.dump());
    if (!img_path.empty()) std::filesystem::remove(img_path);
    json resp = json::parse(resp_line, nullptr, false);
    if (resp.is_discarded() || !resp.contains("shape") || !resp.contains("data"))
        raise(ErrorCode::IOFailure, "external backend: malformed response");
    std::vector<int> shape = resp["shape"].get<std::vector<int>>();
    std::vector<unsigned char> bytes = base64_decode(resp["data"].get<std::string>());
    int64_t n = Tensor::numel_of(shape);
    if (static_cast<int64_t>(bytes.size()) != n * 4)
        raise(ErrorCode::IOFailure, "external backend: payload size mismatch");
    Tensor t(shape);
    for (int64_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * 4, 4);  // little-endian host assumed
        t.data[static_cast<size_t>(i)] = static_cast<double>(f);
    }
    return t;
}

std::vector<FaceCrop> ExternalBackend::detect(const ImageTensor& image) const {
    Tensor t = request_tensor("detect", &image, nullptr);
    if (t.ndim() != 2 || t.dim(1) != 5)
        raise(ErrorCode::IOFailure, "external backend: detect must return M x 5");
    std::vector<FaceCrop> crops;
    for (int i = 0; i < t.dim(0); ++i) {
        int bx = static_cast<int>(t.at2(i, 0));
        int by = static_cast<int>(t.at2(i, 1));
        int bw = static_cast<int>(t.at2(i, 2));
        int bh = static_cast<int>(t.at2(i, 3));
        int x0, y0, s;
        int side = std::max(bw, bh);
        s = std::min(side, std::min(image.width, image.height));
        x0 = std::clamp(bx + bw / 2 - s / 2, 0, image.width - s);
        y0 = std::clamp(by + bh / 2 - s / 2, 0, image.height - s);
        FaceCrop crop;
        crop.image = image.crop(x0, y0, s, s);
        crop.x = x0;
        crop.y = y0;
        crop.w = s;
        crop.h = s;
        crop.detector_score = std::clamp(t.at2(i, 4), 0.0, 1.0);
        crops.push_back(std::move(crop));
    }
    std::stable_sort(crops.begin(), crops.end(), [](const FaceCrop& a, const FaceCrop& b) {
        return a.detector_score > b.detector_score;
    });
    return crops;
}

LocalFeatures ExternalBackend::encode_local(const std::vector<FaceCrop>& crops) const {
    LocalFeatures out;
    out.n = static_cast<int>(crops.size());
    for (int i = 0; i < out.n; ++i) {
        Tensor t = request_tensor("encode_local", &crops[i].image, nullptr);
        if (t.ndim() != 2) raise(ErrorCode::IOFailure, "encode_local must return T x d1");
        if (i == 0) {
            out.t_local = t.dim(0);
            out.d1 = t.dim(1);
            out.tokens = Tensor::zeros({out.n, out.t_local, out.d1});
        }
        if (t.dim(0) != out.t_local || t.dim(1) != out.d1)
            raise(ErrorCode::IOFailure, "encode_local: inconsistent shapes");
        for (int a = 0; a < out.t_local; ++a)
            for (int b = 0; b < out.d1; ++b) out.tokens.at3(i, a, b) = t.at2(a, b);
    }
    return out;
}

GlobalFeatures ExternalBackend::encode_global(const std::vector<FaceCrop>& crops) const {
    GlobalFeatures out;
    out.n = static_cast<int>(crops.size());
    for (int i = 0; i < out.n; ++i) {
        Tensor t = request_tensor("encode_global", &crops[i].image, nullptr);
        int d2 = static_cast<int>(t.numel());
        if (i == 0) {
            out.d2 = d2;
            out.embedding = Tensor::zeros({out.n, 1, d2});
        }
        if (d2 != out.d2) raise(ErrorCode::IOFailure, "encode_global: inconsistent shapes");
        for (int k = 0; k < d2; ++k) out.embedding.at3(i, 0, k) = t.data[k];
    }
    return out;
}

TextEmbedding ExternalBackend::encode_text(const std::string& text) const {
    Tensor t = request_tensor("encode_text", nullptr, &text);
    if (t.ndim() != 2) raise(ErrorCode::IOFailure, "encode_text must return T x d");
    TextEmbedding e;
    e.tokens = std::move(t);
    e.is_null = text.empty();
    return e;
}

double ExternalBackend::quality(const ImageTensor& image) const {
    Tensor t = request_tensor("quality", &image, nullptr);
    if (t.numel() < 1) raise(ErrorCode::IOFailure, "quality must return 1 value");
    return std::clamp(t.data[0], 0.0, 1.0);
}

}  // namespace portrait
