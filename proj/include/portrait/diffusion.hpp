#pragma once

#include <functional>
#include <vector>

#include "portrait/encoders.hpp"
#include "portrait/face_refiner.hpp"
#include "portrait/image.hpp"
#include "portrait/tensor.hpp"

namespace portrait {

// DDPM forward-process coefficients. alphas_bar[t] is the cumulative product
// of (1 - beta) and is strictly decreasing.
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> betas;
    std::vector<double> alphas_bar;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2);
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

struct ConvParams {
    ParamTensor w, b;
    ConvParams() = default;
    ConvParams(const std::string& name, int out_ch, int in_ch, int k, Rng& rng,
               bool zero_init = false);
    void collect(std::vector<ParamTensor*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct ResBlockParams {
    ParamTensor gn1_g, gn1_b, gn2_g, gn2_b;
    ConvParams conv1, conv2, skip;  // skip is 1x1, used when channels change
    ParamTensor time_w, time_b;     // time embedding -> out channels
    bool has_skip = false;

    ResBlockParams() = default;
    ResBlockParams(const std::string& name, int in_ch, int out_ch, int time_dim, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
};

// Pre-norm cross-attention of spatial tokens over an external token sequence.
struct CrossAttnParams {
    ParamTensor gn_g, gn_b;
    AttentionParams attn;

    CrossAttnParams() = default;
    CrossAttnParams(const std::string& name, int ch, int d_kv, Rng& rng, bool zero_out = false);
    void collect(std::vector<ParamTensor*>& out);
};

// Small VAE: factor-8 encoder to a 4-channel latent, mirrored decoder with a
// sigmoid output. `latent_scale` normalizes latents to roughly unit variance
// for the diffusion process; it is fixed after pre-training.
struct VaeParams {
    int c0 = 8, c1 = 16, c2 = 32;
    ParamTensor latent_scale;  // single value, not trainable after pretraining
    ConvParams enc_in, enc_d0, enc_d1, enc_d2, enc_out;
    ParamTensor egn0_g, egn0_b, egn1_g, egn1_b, egn2_g, egn2_b, egn3_g, egn3_b;
    ConvParams dec_in, dec_u2, dec_u1, dec_u0, dec_out;
    ParamTensor dgn0_g, dgn0_b, dgn1_g, dgn1_b, dgn2_g, dgn2_b, dgn3_g, dgn3_b;

    VaeParams() = default;
    VaeParams(int c0, int c1, int c2, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
    void set_trainable(bool trainable);
};

// Graph-level VAE passes. encode_moments returns an 8-channel map (4 mean + 4
// log-variance); encode returns the scaled mean latent (deterministic).
V vae_encode_moments(Graph& g, V img_chw, VaeParams& p);
V vae_encode_graph(Graph& g, V img_chw, VaeParams& p);
V vae_decode_graph(Graph& g, V latent, VaeParams& p);

// Value-level wrappers with the shape contract (H, W divisible by 8).
Tensor vae_encode(const ImageTensor& img, VaeParams& p);
ImageTensor vae_decode(const Tensor& latent, VaeParams& p);

struct VaePretrainReport {
    int steps = 0;
    double final_loss = 0.0;
    double psnr = 0.0;  // reconstruction PSNR over the training set
};

// Reconstruction + small KL objective on the fixture corpus; freezes the
// parameters and fixes latent_scale when done.
VaePretrainReport vae_pretrain(VaeParams& p, const std::vector<ImageTensor>& images, int steps,
                               double lr, uint64_t seed);

// Encoder/mid stack shared by the base U-Net and the control branch copy.
struct UNetEncoderParams {
    ConvParams conv_in;  // 4 -> c0
    ResBlockParams res0;
    CrossAttnParams attn0;
    ConvParams down0;  // c0 -> c1, stride 2
    ResBlockParams res1;
    CrossAttnParams attn1;
    ConvParams down1;  // c1 -> c2, stride 2
    ResBlockParams res2;
    CrossAttnParams attn2;
    ResBlockParams mid1;
    CrossAttnParams mid_attn;
    ResBlockParams mid2;

    UNetEncoderParams() = default;
    UNetEncoderParams(const std::string& name, int c0, int c1, int c2, int d_text, int time_dim,
                      Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
};

// Control residuals: one map per decoder injection point (the three encoder
// skips plus the mid feature).
struct ControlResiduals {
    V skip0{}, skip1{}, skip2{}, mid{};
    bool present = false;
};

struct ControlResidualValues {
    Tensor skip0, skip1, skip2, mid;
    bool present = false;
};

// Identity-token adapter used by the `none-adapter` condition ablation: plain
// cross-attention over face tokens inside the base decoder, zero-initialized
// output so a fresh adapter is a no-op.
struct AdapterParams {
    int d_face = 0;
    CrossAttnParams a2, a1, a0;

    AdapterParams() = default;
    AdapterParams(int c0, int c1, int c2, int d_face, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
    void set_trainable(bool trainable);
};

struct UNetParams {
    int c0 = 16, c1 = 32, c2 = 64;
    int d_text = 16, time_dim = 64, heads = 4;
    ParamTensor time_w1, time_b1, time_w2, time_b2;
    UNetEncoderParams encoder;
    ConvParams up1, up0;  // channel-reducing convs after nearest upsampling
    ResBlockParams dec_res2, dec_res1, dec_res0;
    CrossAttnParams dec_attn2, dec_attn1, dec_attn0;
    ParamTensor out_gn_g, out_gn_b;
    ConvParams conv_out;

    UNetParams() = default;
    UNetParams(int c0, int c1, int c2, int d_text, int time_dim, int heads, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
    void set_trainable(bool trainable);
};

Tensor timestep_embedding(int t, int dim);

struct UnetPretrainReport {
    int steps = 0;
    double first_loss = 0.0;  // mean over the first 50 steps
    double final_loss = 0.0;  // mean over the last 50 steps
};

// Unconditional denoising pre-training of the base U-Net on the fixture
// corpus (null text, no control residuals), run after the VAE is frozen and
// before the conditional stage; the base is frozen afterwards, mirroring the
// role of the pretrained denoiser the control branch attaches to.
UnetPretrainReport unet_pretrain(UNetParams& p, VaeParams& vae, const NoiseSchedule& sched,
                                 const std::vector<ImageTensor>& images, int steps, double lr,
                                 uint64_t seed, int t_text, int d_text);


// Heads that divide the channel count (attention widths vary per resolution).
int heads_for_width(int width, int preferred);

struct EncoderTaps {
    V e0{}, e1{}, e2{}, mid{};
};

V unet_time_embedding(Graph& g, int t, UNetParams& p);
EncoderTaps unet_encode(Graph& g, V z_t, V temb, const TextEmbedding* text,
                        UNetEncoderParams& enc, int heads, int c0, const V* input_adapter);

// Full denoiser. `residuals` (when present) are added to the encoder skips and
// mid feature before the decoder consumes them. `adapter`/`face_tokens` serve
// the none-adapter ablation.
V denoise_graph(Graph& g, V z_t, int t, const TextEmbedding& text, const ControlResiduals* res,
                UNetParams& p, AdapterParams* adapter = nullptr, const V* face_tokens = nullptr,
                EncoderTaps* post_injection = nullptr);

Tensor denoise(const Tensor& z_t, int t, const TextEmbedding& text,
               const ControlResidualValues* res, UNetParams& p, AdapterParams* adapter = nullptr,
               const Tensor* face_tokens = nullptr);

struct SamplerStats {
    int denoiser_evals = 0;  // per branch; the guided wrapper reports both
};

// eps_fn(z_t, t) -> predicted noise (already guidance-combined by the caller).
using DenoiseFn = std::function<Tensor(const Tensor&, int)>;

// Deterministic DDIM (eta = 0). Throws InvalidSteps unless 1 <= steps <= T.
ImageTensor ddim_sample(const DenoiseFn& eps_fn, VaeParams& vae, const NoiseSchedule& sched,
                        int steps, int latent_h, int latent_w, uint64_t seed,
                        SamplerStats* stats = nullptr);

}  // namespace portrait
