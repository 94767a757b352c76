#pragma once

#include <string>
#include <vector>

#include "portrait/diffusion.hpp"

namespace portrait {

// Landmark-conditioned control branch: a trainable copy of the base U-Net
// encoder/mid stack whose input features are z_t features plus an adapter
// embedding of the landmark latent, with per-block cross-attention over the
// flattened face tokens (this is where multi-reference fusion happens), and
// zero-initialized 1x1 output projections so a fresh branch emits exactly
// zero residuals.
struct HiFiNetParams {
    int c0 = 0, c1 = 0, c2 = 0, heads = 4;
    int d_face = 0;
    bool use_text = true;
    double residual_gain = 1.0;  // applied after the zero projections

    ParamTensor time_w1, time_b1, time_w2, time_b2;  // copy of the base time MLP
    ConvParams adapter1, adapter2;  // z_lmk -> c0; second conv zero-initialized
    UNetEncoderParams encoder;      // initialized from the base encoder
    CrossAttnParams face0, face1, face2, face_mid;   // kv = face tokens
    ConvParams zero0, zero1, zero2, zero_mid;        // zero-initialized 1x1

    HiFiNetParams() = default;
    HiFiNetParams(const UNetParams& base, int d_face, bool use_text, Rng& rng,
                  double residual_gain = 1.0);
    void collect(std::vector<ParamTensor*>& out);
    void set_trainable(bool trainable);

    // Re-copies the base time MLP and encoder/mid weights into the branch
    // (used after the base is pre-trained, so the branch starts from the
    // trained encoder exactly as the cited conditioning architecture does).
    // Zero projections, the landmark adapter, and the face attention blocks
    // keep their own values.
    void copy_base_weights(const UNetParams& base);
};

// Forward pass of the branch. z_t and z_lmk share the latent spatial shape;
// face_tokens_flat is (N*33) x d (or the fusion-mode equivalent).
ControlResiduals hifinet_forward(Graph& g, V z_t, int t, V z_lmk, V face_tokens_flat,
                                 const TextEmbedding* text, HiFiNetParams& p,
                                 AttnTrace* face_trace = nullptr);

ControlResidualValues hifinet_forward_values(const Tensor& z_t, int t, const Tensor& z_lmk,
                                             const Tensor& face_tokens_flat,
                                             const TextEmbedding* text, HiFiNetParams& p);

// Base denoiser with residual injection and an optional tap of the
// post-injection features (for the injection-arithmetic tests).
V denoise_with_injection(Graph& g, V z_t, int t, const TextEmbedding& text,
                         const ControlResiduals* res, UNetParams& p,
                         EncoderTaps* post_injection = nullptr);

}  // namespace portrait
