#include "portrait/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "portrait/errors.hpp"

namespace portrait {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
        s.betas[static_cast<size_t>(t)] = beta;
        prod *= 1.0 - beta;
        s.alphas_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.T) raise(ErrorCode::IndexOutOfRange, "add_noise: t out of range");
    if (!z0.same_shape(eps)) raise(ErrorCode::DimensionMismatch, "add_noise: eps shape");
    double a = std::sqrt(sched.alphas_bar[static_cast<size_t>(t)]);
    double b = std::sqrt(1.0 - sched.alphas_bar[static_cast<size_t>(t)]);
    Tensor out = z0;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

ConvParams::ConvParams(const std::string& name, int out_ch, int in_ch, int k, Rng& rng,
                       bool zero_init) {
    double stddev = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
    w = ParamTensor(name + ".w", zero_init ? Tensor::zeros({out_ch, in_ch, k, k})
                                           : Tensor::randn({out_ch, in_ch, k, k}, rng, stddev));
    b = ParamTensor(name + ".b", Tensor::zeros({out_ch}));
}

static int groups_for(int ch) {
    for (int g : {4, 2, 1})
        if (ch % g == 0) return g;
    return 1;
}

int heads_for_width(int width, int preferred) {
    for (int h = preferred; h > 1; --h)
        if (width % h == 0) return h;
    return 1;
}

ResBlockParams::ResBlockParams(const std::string& name, int in_ch, int out_ch, int time_dim,
                               Rng& rng)
    : gn1_g(ParamTensor(name + ".gn1.g", Tensor::full({in_ch}, 1.0))),
      gn1_b(ParamTensor(name + ".gn1.b", Tensor::zeros({in_ch}))),
      gn2_g(ParamTensor(name + ".gn2.g", Tensor::full({out_ch}, 1.0))),
      gn2_b(ParamTensor(name + ".gn2.b", Tensor::zeros({out_ch}))),
      conv1(name + ".conv1", out_ch, in_ch, 3, rng),
      conv2(name + ".conv2", out_ch, out_ch, 3, rng),
      time_w(ParamTensor(name + ".time.w",
                         Tensor::randn({time_dim, out_ch}, rng, 1.0 / std::sqrt(static_cast<double>(time_dim))))),
      time_b(ParamTensor(name + ".time.b", Tensor::zeros({out_ch}))) {
    has_skip = in_ch != out_ch;
    if (has_skip) skip = ConvParams(name + ".skip", out_ch, in_ch, 1, rng);
}

void ResBlockParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&gn1_g, &gn1_b, &gn2_g, &gn2_b}) out.push_back(p);
    conv1.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
    out.push_back(&time_w);
    out.push_back(&time_b);
}

CrossAttnParams::CrossAttnParams(const std::string& name, int ch, int d_kv, Rng& rng,
                                 bool zero_out)
    : gn_g(ParamTensor(name + ".gn.g", Tensor::full({ch}, 1.0))),
      gn_b(ParamTensor(name + ".gn.b", Tensor::zeros({ch}))),
      attn(name + ".attn", ch, d_kv, ch, rng) {
    if (zero_out)
        attn.wo.value = Tensor::zeros(attn.wo.value.shape);
}

void CrossAttnParams::collect(std::vector<ParamTensor*>& out) {
    out.push_back(&gn_g);
    out.push_back(&gn_b);
    attn.collect(out);
}

namespace {

V res_block(Graph& g, V x, V temb, ResBlockParams& p) {
    int in_ch = g.val(x).dim(0);
    V h = g.group_norm(x, g.param(p.gn1_g), g.param(p.gn1_b), groups_for(in_ch));
    h = g.conv2d(g.silu(h), g.param(p.conv1.w), g.param(p.conv1.b), 1, 1);
    V tproj = g.linear(g.silu(temb), g.param(p.time_w), g.param(p.time_b));  // 1 x out_ch
    int out_ch = g.val(h).dim(0);
    h = g.add_chw_bias(h, g.reshape(tproj, {out_ch}));
    h = g.group_norm(h, g.param(p.gn2_g), g.param(p.gn2_b), groups_for(out_ch));
    h = g.conv2d(g.silu(h), g.param(p.conv2.w), g.param(p.conv2.b), 1, 1);
    V sk = p.has_skip ? g.conv2d(x, g.param(p.skip.w), g.param(p.skip.b), 1, 0) : x;
    return g.add(h, sk);
}

V cross_attn_block(Graph& g, V x, V kv_tokens, CrossAttnParams& p, int preferred_heads,
                   AttnTrace* trace = nullptr) {
    int ch = g.val(x).dim(0), h = g.val(x).dim(1), w = g.val(x).dim(2);
    V n = g.group_norm(x, g.param(p.gn_g), g.param(p.gn_b), groups_for(ch));
    V q = g.chw_to_tokens(n);
    V out = multihead_attention(g, q, kv_tokens, kv_tokens, p.attn,
                                heads_for_width(ch, preferred_heads), trace);
    return g.add(x, g.tokens_to_chw(out, ch, h, w));
}

}  // namespace

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

VaeParams::VaeParams(int c0_, int c1_, int c2_, Rng& rng) : c0(c0_), c1(c1_), c2(c2_) {
    latent_scale = ParamTensor("vae.latent_scale", Tensor::full({1}, 1.0), /*train=*/false);
    enc_in = ConvParams("vae.enc_in", c0, 3, 3, rng);
    enc_d0 = ConvParams("vae.enc_d0", c1, c0, 3, rng);
    enc_d1 = ConvParams("vae.enc_d1", c2, c1, 3, rng);
    enc_d2 = ConvParams("vae.enc_d2", c2, c2, 3, rng);
    enc_out = ConvParams("vae.enc_out", 8, c2, 3, rng);
    egn0_g = ParamTensor("vae.egn0.g", Tensor::full({c0}, 1.0));
    egn0_b = ParamTensor("vae.egn0.b", Tensor::zeros({c0}));
    egn1_g = ParamTensor("vae.egn1.g", Tensor::full({c1}, 1.0));
    egn1_b = ParamTensor("vae.egn1.b", Tensor::zeros({c1}));
    egn2_g = ParamTensor("vae.egn2.g", Tensor::full({c2}, 1.0));
    egn2_b = ParamTensor("vae.egn2.b", Tensor::zeros({c2}));
    egn3_g = ParamTensor("vae.egn3.g", Tensor::full({c2}, 1.0));
    egn3_b = ParamTensor("vae.egn3.b", Tensor::zeros({c2}));
    dec_in = ConvParams("vae.dec_in", c2, 4, 3, rng);
    dec_u2 = ConvParams("vae.dec_u2", c2, c2, 3, rng);
    dec_u1 = ConvParams("vae.dec_u1", c1, c2, 3, rng);
    dec_u0 = ConvParams("vae.dec_u0", c0, c1, 3, rng);
    dec_out = ConvParams("vae.dec_out", 3, c0, 3, rng);
    dgn0_g = ParamTensor("vae.dgn0.g", Tensor::full({c2}, 1.0));
    dgn0_b = ParamTensor("vae.dgn0.b", Tensor::zeros({c2}));
    dgn1_g = ParamTensor("vae.dgn1.g", Tensor::full({c2}, 1.0));
    dgn1_b = ParamTensor("vae.dgn1.b", Tensor::zeros({c2}));
    dgn2_g = ParamTensor("vae.dgn2.g", Tensor::full({c1}, 1.0));
    dgn2_b = ParamTensor("vae.dgn2.b", Tensor::zeros({c1}));
    dgn3_g = ParamTensor("vae.dgn3.g", Tensor::full({c0}, 1.0));
    dgn3_b = ParamTensor("vae.dgn3.b", Tensor::zeros({c0}));
}

void VaeParams::collect(std::vector<ParamTensor*>& out) {
    out.push_back(&latent_scale);
    enc_in.collect(out);
    enc_d0.collect(out);
    enc_d1.collect(out);
    enc_d2.collect(out);
    enc_out.collect(out);
    for (ParamTensor* p : {&egn0_g, &egn0_b, &egn1_g, &egn1_b, &egn2_g, &egn2_b, &egn3_g, &egn3_b})
        out.push_back(p);
    dec_in.collect(out);
    dec_u2.collect(out);
    dec_u1.collect(out);
    dec_u0.collect(out);
    dec_out.collect(out);
    for (ParamTensor* p : {&dgn0_g, &dgn0_b, &dgn1_g, &dgn1_b, &dgn2_g, &dgn2_b, &dgn3_g, &dgn3_b})
        out.push_back(p);
}

void VaeParams::set_trainable(bool trainable) {
    std::vector<ParamTensor*> all;
    collect(all);
    for (ParamTensor* p : all) p->trainable = trainable;
    latent_scale.trainable = false;
}

V vae_encode_moments(Graph& g, V img_chw, VaeParams& p) {
    const Tensor& t = g.val(img_chw);
    if (t.ndim() != 3 || t.dim(0) != 3 || t.dim(1) % 8 != 0 || t.dim(2) % 8 != 0)
        raise(ErrorCode::DimensionMismatch, "vae_encode: image must be 3xHxW with H, W divisible by 8");
    V h = g.conv2d(img_chw, g.param(p.enc_in.w), g.param(p.enc_in.b), 1, 1);
    h = g.silu(g.group_norm(h, g.param(p.egn0_g), g.param(p.egn0_b), groups_for(p.c0)));
    h = g.conv2d(h, g.param(p.enc_d0.w), g.param(p.enc_d0.b), 2, 1);
    h = g.silu(g.group_norm(h, g.param(p.egn1_g), g.param(p.egn1_b), groups_for(p.c1)));
    h = g.conv2d(h, g.param(p.enc_d1.w), g.param(p.enc_d1.b), 2, 1);
    h = g.silu(g.group_norm(h, g.param(p.egn2_g), g.param(p.egn2_b), groups_for(p.c2)));
    h = g.conv2d(h, g.param(p.enc_d2.w), g.param(p.enc_d2.b), 2, 1);
    h = g.silu(g.group_norm(h, g.param(p.egn3_g), g.param(p.egn3_b), groups_for(p.c2)));
    return g.conv2d(h, g.param(p.enc_out.w), g.param(p.enc_out.b), 1, 1);  // 8 x H/8 x W/8
}

V vae_encode_graph(Graph& g, V img_chw, VaeParams& p) {
    V moments = vae_encode_moments(g, img_chw, p);
    int h = g.val(moments).dim(1), w = g.val(moments).dim(2);
    // Mean channels only: deterministic latents outside of pre-training.
    V tokens = g.chw_to_tokens(moments);          // (h*w) x 8
    V mean = g.slice_cols(tokens, 0, 4);
    V latent = g.tokens_to_chw(mean, 4, h, w);
    return g.mul_scalar_node(latent, g.param(p.latent_scale));
}

V vae_decode_graph(Graph& g, V latent, VaeParams& p) {
    const Tensor& t = g.val(latent);
    if (t.ndim() != 3 || t.dim(0) != 4)
        raise(ErrorCode::DimensionMismatch, "vae_decode: latent must be 4xhxw");
    V inv = g.div_elem(g.input(Tensor::full({1}, 1.0)), g.param(p.latent_scale));
    V h = g.mul_scalar_node(latent, inv);
    h = g.conv2d(h, g.param(p.dec_in.w), g.param(p.dec_in.b), 1, 1);
    h = g.silu(g.group_norm(h, g.param(p.dgn0_g), g.param(p.dgn0_b), groups_for(p.c2)));
    h = g.conv2d(g.upsample2x(h), g.param(p.dec_u2.w), g.param(p.dec_u2.b), 1, 1);
    h = g.silu(g.group_norm(h, g.param(p.dgn1_g), g.param(p.dgn1_b), groups_for(p.c2)));
    h = g.conv2d(g.upsample2x(h), g.param(p.dec_u1.w), g.param(p.dec_u1.b), 1, 1);
    h = g.silu(g.group_norm(h, g.param(p.dgn2_g), g.param(p.dgn2_b), groups_for(p.c1)));
    h = g.conv2d(g.upsample2x(h), g.param(p.dec_u0.w), g.param(p.dec_u0.b), 1, 1);
    h = g.silu(g.group_norm(h, g.param(p.dgn3_g), g.param(p.dgn3_b), groups_for(p.c0)));
    h = g.conv2d(h, g.param(p.dec_out.w), g.param(p.dec_out.b), 1, 1);
    return g.sigmoid_elem(h);
}

Tensor vae_encode(const ImageTensor& img, VaeParams& p) {
    Graph g;
    return g.val(vae_encode_graph(g, g.input(img.to_chw()), p));
}

ImageTensor vae_decode(const Tensor& latent, VaeParams& p) {
    Graph g;
    return ImageTensor::from_chw(g.val(vae_decode_graph(g, g.input(latent), p)));
}

VaePretrainReport vae_pretrain(VaeParams& p, const std::vector<ImageTensor>& images, int steps,
                               double lr, uint64_t seed) {
    if (images.empty()) raise(ErrorCode::InsufficientSamples, "vae_pretrain: empty corpus");
    p.set_trainable(true);
    std::vector<ParamTensor*> params;
    p.collect(params);
    Rng rng(seed);
    std::vector<Tensor> chw;
    chw.reserve(images.size());
    for (const auto& img : images) chw.push_back(img.to_chw());

    VaePretrainReport report;
    const double kl_weight = 1e-6;
    for (int step = 1; step <= steps; ++step) {
        zero_gradients(params);
        Graph g;
        const Tensor& x = chw[static_cast<size_t>(rng.uniform_int(chw.size()))];
        V xin = g.input(x);
        V moments = vae_encode_moments(g, xin, p);
        int h8 = g.val(moments).dim(1), w8 = g.val(moments).dim(2);
        V tok = g.chw_to_tokens(moments);
        V mu = g.tokens_to_chw(g.slice_cols(tok, 0, 4), 4, h8, w8);
        V logvar = g.tokens_to_chw(g.slice_cols(tok, 4, 8), 4, h8, w8);
        Tensor noise = Tensor::randn({4, h8, w8}, rng);
        V z = g.add(mu, g.mul(g.exp_elem(g.scale(logvar, 0.5)), g.input(noise)));
        V recon = vae_decode_graph(g, z, p);
        V rec_loss = g.mean_all(g.sumsq(g.sub(recon, xin)));
        // KL(q || N(0,1)) per latent element: 0.5 (mu^2 + var - 1 - log var).
        V kl = g.scale(g.mean_all(g.sub(g.add(g.mul(mu, mu), g.exp_elem(logvar)),
                                        g.add_scalar(logvar, 1.0))),
                       0.5);
        V loss = g.add(rec_loss, g.scale(kl, kl_weight));
        g.backward(loss);
        adam_update(params, lr, step);
        report.final_loss = g.val(loss).data[0];
    }
    report.steps = steps;

    // Fix the latent scale from the corpus statistics, then freeze.
    p.latent_scale.value.data[0] = 1.0;
    double var = 0.0;
    int64_t count = 0;
    for (const auto& img : images) {
        Tensor z = vae_encode(img, p);
        for (double v : z.data) {
            var += v * v;
            ++count;
        }
    }
    double stddev = std::sqrt(var / static_cast<double>(count));
    p.latent_scale.value.data[0] = stddev > 1e-9 ? 1.0 / stddev : 1.0;
    p.set_trainable(false);

    double worst = 1e9;
    double acc = 0.0;
    for (const auto& img : images) {
        ImageTensor rec = vae_decode(vae_encode(img, p), p);
        double v = psnr(img, rec);
        worst = std::min(worst, v);
        acc += v;
    }
    report.psnr = acc / static_cast<double>(images.size());
    return report;
}

UnetPretrainReport unet_pretrain(UNetParams& p, VaeParams& vae, const NoiseSchedule& sched,
                                 const std::vector<ImageTensor>& images, int steps, double lr,
                                 uint64_t seed, int t_text, int d_text) {
    if (images.empty()) raise(ErrorCode::InsufficientSamples, "unet_pretrain: empty corpus");
    p.set_trainable(true);
    std::vector<ParamTensor*> params;
    p.collect(params);
    Rng rng(seed);
    std::vector<Tensor> latents;
    latents.reserve(images.size());
    for (const auto& img : images) latents.push_back(vae_encode(img, vae));
    TextEmbedding null_text = TextEmbedding::null_embedding(t_text, d_text);

    UnetPretrainReport report;
    report.steps = steps;
    for (int step = 1; step <= steps; ++step) {
        zero_gradients(params);
        const Tensor& z0 = latents[static_cast<size_t>(rng.uniform_int(latents.size()))];
        int t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
        Tensor eps = Tensor::randn(z0.shape, rng);
        Tensor z_t = add_noise(z0, t, eps, sched);
        Graph g;
        V eps_hat = denoise_graph(g, g.input(z_t), t, null_text, nullptr, p);
        V loss = g.mean_all(g.sumsq(g.sub(eps_hat, g.input(eps))));
        g.backward(loss);
        adam_update(params, lr, step);
        double v = g.val(loss).data[0];
        if (step <= 50) report.first_loss += v / 50.0;
        if (step > steps - 50) report.final_loss += v / 50.0;
    }
    p.set_trainable(false);
    return report;
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

UNetEncoderParams::UNetEncoderParams(const std::string& name, int c0, int c1, int c2, int d_text,
                                     int time_dim, Rng& rng)
    : conv_in(name + ".conv_in", c0, 4, 3, rng),
      res0(name + ".res0", c0, c0, time_dim, rng),
      attn0(name + ".attn0", c0, d_text, rng),
      down0(name + ".down0", c1, c0, 3, rng),
      res1(name + ".res1", c1, c1, time_dim, rng),
      attn1(name + ".attn1", c1, d_text, rng),
      down1(name + ".down1", c2, c1, 3, rng),
      res2(name + ".res2", c2, c2, time_dim, rng),
      attn2(name + ".attn2", c2, d_text, rng),
      mid1(name + ".mid1", c2, c2, time_dim, rng),
      mid_attn(name + ".mid_attn", c2, d_text, rng),
      mid2(name + ".mid2", c2, c2, time_dim, rng) {}

void UNetEncoderParams::collect(std::vector<ParamTensor*>& out) {
    conv_in.collect(out);
    res0.collect(out);
    attn0.collect(out);
    down0.collect(out);
    res1.collect(out);
    attn1.collect(out);
    down1.collect(out);
    res2.collect(out);
    attn2.collect(out);
    mid1.collect(out);
    mid_attn.collect(out);
    mid2.collect(out);
}

AdapterParams::AdapterParams(int c0, int c1, int c2, int d_face_, Rng& rng) : d_face(d_face_) {
    a2 = CrossAttnParams("adapter.a2", c2, d_face, rng, /*zero_out=*/true);
    a1 = CrossAttnParams("adapter.a1", c1, d_face, rng, /*zero_out=*/true);
    a0 = CrossAttnParams("adapter.a0", c0, d_face, rng, /*zero_out=*/true);
}

void AdapterParams::collect(std::vector<ParamTensor*>& out) {
    a2.collect(out);
    a1.collect(out);
    a0.collect(out);
}

void AdapterParams::set_trainable(bool trainable) {
    std::vector<ParamTensor*> all;
    collect(all);
    for (ParamTensor* p : all) p->trainable = trainable;
}

UNetParams::UNetParams(int c0_, int c1_, int c2_, int d_text_, int time_dim_, int heads_, Rng& rng)
    : c0(c0_), c1(c1_), c2(c2_), d_text(d_text_), time_dim(time_dim_), heads(heads_) {
    time_w1 = ParamTensor("unet.time.w1",
                          Tensor::randn({time_dim, time_dim}, rng, 1.0 / std::sqrt(static_cast<double>(time_dim))));
    time_b1 = ParamTensor("unet.time.b1", Tensor::zeros({time_dim}));
    time_w2 = ParamTensor("unet.time.w2",
                          Tensor::randn({time_dim, time_dim}, rng, 1.0 / std::sqrt(static_cast<double>(time_dim))));
    time_b2 = ParamTensor("unet.time.b2", Tensor::zeros({time_dim}));
    encoder = UNetEncoderParams("unet.enc", c0, c1, c2, d_text, time_dim, rng);
    up1 = ConvParams("unet.up1", c1, c2, 3, rng);
    up0 = ConvParams("unet.up0", c0, c1, 3, rng);
    dec_res2 = ResBlockParams("unet.dec_res2", 2 * c2, c2, time_dim, rng);
    dec_res1 = ResBlockParams("unet.dec_res1", 2 * c1, c1, time_dim, rng);
    dec_res0 = ResBlockParams("unet.dec_res0", 2 * c0, c0, time_dim, rng);
    dec_attn2 = CrossAttnParams("unet.dec_attn2", c2, d_text, rng);
    dec_attn1 = CrossAttnParams("unet.dec_attn1", c1, d_text, rng);
    dec_attn0 = CrossAttnParams("unet.dec_attn0", c0, d_text, rng);
    out_gn_g = ParamTensor("unet.out_gn.g", Tensor::full({c0}, 1.0));
    out_gn_b = ParamTensor("unet.out_gn.b", Tensor::zeros({c0}));
    conv_out = ConvParams("unet.conv_out", 4, c0, 3, rng);
}

void UNetParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&time_w1, &time_b1, &time_w2, &time_b2}) out.push_back(p);
    encoder.collect(out);
    up1.collect(out);
    up0.collect(out);
    dec_res2.collect(out);
    dec_res1.collect(out);
    dec_res0.collect(out);
    dec_attn2.collect(out);
    dec_attn1.collect(out);
    dec_attn0.collect(out);
    out.push_back(&out_gn_g);
    out.push_back(&out_gn_b);
    conv_out.collect(out);
}

void UNetParams::set_trainable(bool trainable) {
    std::vector<ParamTensor*> all;
    collect(all);
    for (ParamTensor* p : all) p->trainable = trainable;
}

Tensor timestep_embedding(int t, int dim) {
    Tensor e({1, dim});
    int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
        e.at2(0, k) = std::sin(t * freq);
        e.at2(0, half + k) = std::cos(t * freq);
    }
    return e;
}

V unet_time_embedding(Graph& g, int t, UNetParams& p) {
    V e = g.input(timestep_embedding(t, p.time_dim));
    V h = g.silu(g.linear(e, g.param(p.time_w1), g.param(p.time_b1)));
    return g.linear(h, g.param(p.time_w2), g.param(p.time_b2));
}

EncoderTaps unet_encode(Graph& g, V z_t, V temb, const TextEmbedding* text,
                        UNetEncoderParams& enc, int heads, int /*c0*/, const V* input_adapter) {
    V text_tokens{};
    if (text) text_tokens = g.input(text->tokens);
    V h = g.conv2d(z_t, g.param(enc.conv_in.w), g.param(enc.conv_in.b), 1, 1);
    if (input_adapter) h = g.add(h, *input_adapter);
    EncoderTaps taps;
    h = res_block(g, h, temb, enc.res0);
    if (text) h = cross_attn_block(g, h, text_tokens, enc.attn0, heads);
    taps.e0 = h;
    h = g.conv2d(h, g.param(enc.down0.w), g.param(enc.down0.b), 2, 1);
    h = res_block(g, h, temb, enc.res1);
    if (text) h = cross_attn_block(g, h, text_tokens, enc.attn1, heads);
    taps.e1 = h;
    h = g.conv2d(h, g.param(enc.down1.w), g.param(enc.down1.b), 2, 1);
    h = res_block(g, h, temb, enc.res2);
    if (text) h = cross_attn_block(g, h, text_tokens, enc.attn2, heads);
    taps.e2 = h;
    h = res_block(g, h, temb, enc.mid1);
    if (text) h = cross_attn_block(g, h, text_tokens, enc.mid_attn, heads);
    h = res_block(g, h, temb, enc.mid2);
    taps.mid = h;
    return taps;
}

V denoise_graph(Graph& g, V z_t, int t, const TextEmbedding& text, const ControlResiduals* res,
                UNetParams& p, AdapterParams* adapter, const V* face_tokens,
                EncoderTaps* post_injection) {
    const Tensor& zt = g.val(z_t);
    if (zt.ndim() != 3 || zt.dim(0) != 4)
        raise(ErrorCode::DimensionMismatch, "denoise: z_t must be 4xhxw");
    V temb = unet_time_embedding(g, t, p);
    EncoderTaps taps = unet_encode(g, z_t, temb, &text, p.encoder, p.heads, p.c0, nullptr);
    V e0 = taps.e0, e1 = taps.e1, e2 = taps.e2, mid = taps.mid;
    if (res && res->present) {
        e0 = g.add(e0, res->skip0);
        e1 = g.add(e1, res->skip1);
        e2 = g.add(e2, res->skip2);
        mid = g.add(mid, res->mid);
    }
    if (post_injection) *post_injection = EncoderTaps{e0, e1, e2, mid};
    V text_tokens = g.input(text.tokens);
    V h = res_block(g, g.concat_channels(mid, e2), temb, p.dec_res2);
    h = cross_attn_block(g, h, text_tokens, p.dec_attn2, p.heads);
    if (adapter && face_tokens) h = cross_attn_block(g, h, *face_tokens, adapter->a2, p.heads);
    h = g.conv2d(g.upsample2x(h), g.param(p.up1.w), g.param(p.up1.b), 1, 1);
    h = res_block(g, g.concat_channels(h, e1), temb, p.dec_res1);
    h = cross_attn_block(g, h, text_tokens, p.dec_attn1, p.heads);
    if (adapter && face_tokens) h = cross_attn_block(g, h, *face_tokens, adapter->a1, p.heads);
    h = g.conv2d(g.upsample2x(h), g.param(p.up0.w), g.param(p.up0.b), 1, 1);
    h = res_block(g, g.concat_channels(h, e0), temb, p.dec_res0);
    h = cross_attn_block(g, h, text_tokens, p.dec_attn0, p.heads);
    if (adapter && face_tokens) h = cross_attn_block(g, h, *face_tokens, adapter->a0, p.heads);
    h = g.silu(g.group_norm(h, g.param(p.out_gn_g), g.param(p.out_gn_b), groups_for(p.c0)));
    return g.conv2d(h, g.param(p.conv_out.w), g.param(p.conv_out.b), 1, 1);
}

Tensor denoise(const Tensor& z_t, int t, const TextEmbedding& text,
               const ControlResidualValues* res, UNetParams& p, AdapterParams* adapter,
               const Tensor* face_tokens) {
    Graph g;
    V z = g.input(z_t);
    ControlResiduals rg;
    if (res && res->present) {
        rg.present = true;
        rg.skip0 = g.input(res->skip0);
        rg.skip1 = g.input(res->skip1);
        rg.skip2 = g.input(res->skip2);
        rg.mid = g.input(res->mid);
    }
    V ft{};
    if (face_tokens) ft = g.input(*face_tokens);
    V out = denoise_graph(g, z, t, text, rg.present ? &rg : nullptr, p, adapter,
                          face_tokens ? &ft : nullptr);
    return g.val(out);
}

// ---------------------------------------------------------------------------
// DDIM
// ---------------------------------------------------------------------------

ImageTensor ddim_sample(const DenoiseFn& eps_fn, VaeParams& vae, const NoiseSchedule& sched,
                        int steps, int latent_h, int latent_w, uint64_t seed,
                        SamplerStats* stats) {
    if (steps < 1 || steps > sched.T)
        raise(ErrorCode::InvalidSteps, "steps must be in [1, T]");
    int stride = sched.T / steps;
    std::vector<int> taus(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) taus[static_cast<size_t>(i)] = (i + 1) * stride - 1;

    Rng rng(seed);
    Tensor z = Tensor::randn({4, latent_h, latent_w}, rng);
    for (int i = steps - 1; i >= 0; --i) {
        int t = taus[static_cast<size_t>(i)];
        Tensor eps = eps_fn(z, t);
        if (stats) stats->denoiser_evals++;
        double abar = sched.alphas_bar[static_cast<size_t>(t)];
        double abar_prev = i > 0 ? sched.alphas_bar[static_cast<size_t>(taus[static_cast<size_t>(i - 1)])] : 1.0;
        double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
        double sap = std::sqrt(abar_prev), sbp = std::sqrt(1.0 - abar_prev);
        for (size_t k = 0; k < z.data.size(); ++k) {
            double z0_hat = (z.data[k] - sb * eps.data[k]) / sa;
            z.data[k] = sap * z0_hat + sbp * eps.data[k];
        }
    }
    return vae_decode(z, vae);
}

}  // namespace portrait
