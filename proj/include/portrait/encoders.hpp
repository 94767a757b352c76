#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "portrait/image.hpp"
#include "portrait/tensor.hpp"

namespace portrait {

struct FaceCrop {
    ImageTensor image;             // square crop
    int x = 0, y = 0, w = 0, h = 0;  // crop region in source-image pixels
    double detector_score = 0.0;
};

struct LocalFeatures {
    int n = 0, t_local = 0, d1 = 0;
    Tensor tokens;  // N x T_local x d1
};

struct GlobalFeatures {
    int n = 0, d2 = 0;
    Tensor embedding;  // N x 1 x d2
};

struct TextEmbedding {
    Tensor tokens;  // T_text x d_text
    bool is_null = false;

    // The null embedding used for classifier-free guidance is the all-zero
    // token matrix.
    static TextEmbedding null_embedding(int t_text, int d_text) {
        TextEmbedding e;
        e.tokens = Tensor::zeros({t_text, d_text});
        e.is_null = true;
        return e;
    }
};

// Pluggable encoder backend: face detection, local/global face features,
// text embedding, face quality. Implementations must be deterministic and
// stateless after construction (safe for concurrent read-only use).
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;

    virtual std::vector<FaceCrop> detect(const ImageTensor& image) const = 0;
    virtual LocalFeatures encode_local(const std::vector<FaceCrop>& crops) const = 0;
    virtual GlobalFeatures encode_global(const std::vector<FaceCrop>& crops) const = 0;
    virtual TextEmbedding encode_text(const std::string& text) const = 0;
    virtual double quality(const ImageTensor& image) const = 0;

    // Optional human-matting hook applied before detection; identity by default.
    virtual ImageTensor matting(const ImageTensor& image) const { return image; }
};

struct ToyBackendConfig {
    uint64_t seed = 1234;
    int d1 = 32;
    int d2 = 16;
    int t_local = 257;
    int d_text = 16;
    int t_text = 8;
    double detect_threshold = 0.35;  // luminance threshold for blob detection
    int detect_min_pixels = 16;
};

// Deterministic stand-in encoders. Local features come from a fixed random
// projection of grid-cell colors (+ cell position), the global embedding from
// a pooled projection, text from hashed bag-of-token vectors. The detector
// finds bright connected components against a dark background, which is the
// contract the synthetic fixture faces are drawn to.
class ToyBackend : public EncoderBackend {
public:
    explicit ToyBackend(ToyBackendConfig cfg = {});

    std::vector<FaceCrop> detect(const ImageTensor& image) const override;
    LocalFeatures encode_local(const std::vector<FaceCrop>& crops) const override;
    GlobalFeatures encode_global(const std::vector<FaceCrop>& crops) const override;
    TextEmbedding encode_text(const std::string& text) const override;
    double quality(const ImageTensor& image) const override;
    ImageTensor matting(const ImageTensor& image) const override {
        return matting_fn_ ? matting_fn_(image) : image;
    }

    void set_matting(std::function<ImageTensor(const ImageTensor&)> fn) {
        matting_fn_ = std::move(fn);
    }

    // Differentiable twin of the global embedding (same weights), used by the
    // identity loss during training.
    V embed_global_graph(Graph& g, V image_chw) const;
    Tensor embed_global(const ImageTensor& image) const;

    // Differentiable CLS-style local summary (used as the toy "CLIP" feature).
    Tensor embed_cls(const ImageTensor& image) const;

    const ToyBackendConfig& config() const { return cfg_; }
    const Tensor& local_weight() const { return w_local_; }
    const Tensor& local_bias() const { return b_local_; }
    const Tensor& cls_weight() const { return w_cls_; }
    const Tensor& global_weight() const { return w_global_; }

private:
    ToyBackendConfig cfg_;
    Tensor w_local_;   // 5 x d1 (cell r,g,b + normalized row,col)
    Tensor b_local_;   // d1
    Tensor w_cls_;     // 3 x d1
    Tensor w_global_;  // 192 x d2
    std::function<ImageTensor(const ImageTensor&)> matting_fn_;
};

// Client for out-of-process encoder backends speaking line-delimited JSON on
// stdio. Request: {"op": ..., "image_path": ...} (or "text" for encode_text).
// Response: {"shape": [...], "data": "<base64 little-endian float32>"}.
class ExternalBackend : public EncoderBackend {
public:
    explicit ExternalBackend(const std::string& command, std::string workdir = "/tmp");
    ~ExternalBackend() override;

    std::vector<FaceCrop> detect(const ImageTensor& image) const override;
    LocalFeatures encode_local(const std::vector<FaceCrop>& crops) const override;
    GlobalFeatures encode_global(const std::vector<FaceCrop>& crops) const override;
    TextEmbedding encode_text(const std::string& text) const override;
    double quality(const ImageTensor& image) const override;

private:
    struct Proc;
    std::unique_ptr<Proc> proc_;
    std::string workdir_;
    mutable std::mutex mu_;
    mutable int tmp_counter_ = 0;

    Tensor request_tensor(const std::string& op, const ImageTensor* img,
                          const std::string* text) const;
};

// Highest-scoring square face crop. Throws NoFaceFound when detection is empty.
FaceCrop detect_and_crop(const ImageTensor& image, const EncoderBackend& backend);

// Per-reference features, order preserving. NoFaceFound carries the index of
// the failing reference.
std::pair<LocalFeatures, GlobalFeatures> encode_references(const std::vector<ImageTensor>& refs,
                                                           const EncoderBackend& backend,
                                                           int n_max = 8);

std::string base64_encode(const unsigned char* data, size_t len);
std::vector<unsigned char> base64_decode(const std::string& s);

}  // namespace portrait
