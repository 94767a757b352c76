#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "portrait/tensor.hpp"

namespace portrait {

// RGB image with values in [0, 1], stored interleaved row-major (H x W x 3).
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    ImageTensor() = default;
    ImageTensor(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0) {}

    double& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    double at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }

    bool valid() const { return height >= 8 && width >= 8; }
    bool in_bounds(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }

    void set_pixel(int y, int x, double r, double g, double b) {
        if (!in_bounds(y, x)) return;
        at(y, x, 0) = r;
        at(y, x, 1) = g;
        at(y, x, 2) = b;
    }

    double luminance(int y, int x) const {
        return 0.299 * at(y, x, 0) + 0.587 * at(y, x, 1) + 0.114 * at(y, x, 2);
    }

    ImageTensor crop(int x0, int y0, int w, int h) const;
    ImageTensor resize_area(int out_h, int out_w) const;  // box-filter resampling

    // Conversion between image layout and CHW tensors used by the nets.
    Tensor to_chw() const;
    static ImageTensor from_chw(const Tensor& t, bool clamp = true);

    // Content key for fixture registries: FNV-1a over 8-bit quantized pixels.
    uint64_t content_key() const;
};

// PNG I/O (8-bit RGB). Writing is deterministic: fixed filter and compression
// settings so identical pixel data produces identical files.
void write_png(const std::string& path, const ImageTensor& img);
ImageTensor read_png(const std::string& path);

double psnr(const ImageTensor& a, const ImageTensor& b);

// Variance-of-Laplacian sharpness mapped to [0,1] with a fixed logistic.
double sharpness_score(const ImageTensor& img);

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 1469598103934665603ull);
std::string hex64(uint64_t v);

}  // namespace portrait
