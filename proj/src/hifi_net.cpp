#include "portrait/hifi_net.hpp"

#include <cmath>

#include "portrait/errors.hpp"

namespace portrait {

namespace {
// The branch starts as an exact copy of the base encoder weights
// (ControlNet-style); renaming keeps checkpoint section entries unique.
void rename_with_prefix(std::vector<ParamTensor*>& params, const std::string& prefix) {
    for (ParamTensor* p : params) p->name = prefix + p->name;
}

int groups_for(int ch) {
    for (int g : {4, 2, 1})
        if (ch % g == 0) return g;
    return 1;
}

V branch_cross_attn(Graph& g, V x, V kv, CrossAttnParams& p, int preferred_heads,
                    AttnTrace* trace) {
    int ch = g.val(x).dim(0), h = g.val(x).dim(1), w = g.val(x).dim(2);
    V n = g.group_norm(x, g.param(p.gn_g), g.param(p.gn_b), groups_for(ch));
    V q = g.chw_to_tokens(n);
    V out = multihead_attention(g, q, kv, kv, p.attn, heads_for_width(ch, preferred_heads), trace);
    return g.add(x, g.tokens_to_chw(out, ch, h, w));
}
}  // namespace

HiFiNetParams::HiFiNetParams(const UNetParams& base, int d_face_, bool use_text_, Rng& rng,
                             double residual_gain_)
    : c0(base.c0), c1(base.c1), c2(base.c2), heads(base.heads), d_face(d_face_),
      use_text(use_text_), residual_gain(residual_gain_) {
    time_w1 = base.time_w1;
    time_b1 = base.time_b1;
    time_w2 = base.time_w2;
    time_b2 = base.time_b2;
    encoder = base.encoder;
    adapter1 = ConvParams("adapter1", c0, 4, 3, rng);
    adapter2 = ConvParams("adapter2", c0, c0, 3, rng, /*zero_init=*/true);
    face0 = CrossAttnParams("face0", c0, d_face, rng);
    face1 = CrossAttnParams("face1", c1, d_face, rng);
    face2 = CrossAttnParams("face2", c2, d_face, rng);
    face_mid = CrossAttnParams("face_mid", c2, d_face, rng);
    zero0 = ConvParams("zero0", c0, c0, 1, rng, /*zero_init=*/true);
    zero1 = ConvParams("zero1", c1, c1, 1, rng, /*zero_init=*/true);
    zero2 = ConvParams("zero2", c2, c2, 1, rng, /*zero_init=*/true);
    zero_mid = ConvParams("zero_mid", c2, c2, 1, rng, /*zero_init=*/true);
    std::vector<ParamTensor*> all;
    collect(all);
    rename_with_prefix(all, "hifinet/");
    set_trainable(true);
}

void HiFiNetParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&time_w1, &time_b1, &time_w2, &time_b2}) out.push_back(p);
    adapter1.collect(out);
    adapter2.collect(out);
    encoder.collect(out);
    face0.collect(out);
    face1.collect(out);
    face2.collect(out);
    face_mid.collect(out);
    zero0.collect(out);
    zero1.collect(out);
    zero2.collect(out);
    zero_mid.collect(out);
}

void HiFiNetParams::copy_base_weights(const UNetParams& base) {
    time_w1.value = base.time_w1.value;
    time_b1.value = base.time_b1.value;
    time_w2.value = base.time_w2.value;
    time_b2.value = base.time_b2.value;
    std::vector<ParamTensor*> dst;
    encoder.collect(dst);
    UNetEncoderParams base_copy = base.encoder;  // collect() is non-const
    std::vector<ParamTensor*> src;
    base_copy.collect(src);
    for (size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

void HiFiNetParams::set_trainable(bool trainable) {
    std::vector<ParamTensor*> all;
    collect(all);
    for (ParamTensor* p : all) p->trainable = trainable;
}

ControlResiduals hifinet_forward(Graph& g, V z_t, int t, V z_lmk, V face_tokens_flat,
                                 const TextEmbedding* text, HiFiNetParams& p,
                                 AttnTrace* face_trace) {
    const Tensor& zt = g.val(z_t);
    const Tensor& zl = g.val(z_lmk);
    if (!zt.same_shape(zl))
        raise(ErrorCode::DimensionMismatch, "hifinet: z_lmk and z_t must share shape");
    if (g.val(face_tokens_flat).dim(1) != p.d_face)
        raise(ErrorCode::DimensionMismatch, "hifinet: face token width != d_face");

    // Branch time embedding (copied MLP, trainable).
    V e = g.input(timestep_embedding(t, g.val(g.param(p.time_w1)).dim(0)));
    V temb = g.linear(g.silu(g.linear(e, g.param(p.time_w1), g.param(p.time_b1))),
                      g.param(p.time_w2), g.param(p.time_b2));

    V text_tokens{};
    bool with_text = p.use_text && text != nullptr;
    if (with_text) text_tokens = g.input(text->tokens);

    // Landmark latent enters additively through the adapter stack.
    V a = g.conv2d(z_lmk, g.param(p.adapter1.w), g.param(p.adapter1.b), 1, 1);
    a = g.conv2d(g.silu(a), g.param(p.adapter2.w), g.param(p.adapter2.b), 1, 1);

    UNetEncoderParams& enc = p.encoder;
    V h = g.conv2d(z_t, g.param(enc.conv_in.w), g.param(enc.conv_in.b), 1, 1);
    h = g.add(h, a);

    auto res_fwd = [&](V x, ResBlockParams& rp) {
        int in_ch = g.val(x).dim(0);
        V n1 = g.group_norm(x, g.param(rp.gn1_g), g.param(rp.gn1_b), groups_for(in_ch));
        V c = g.conv2d(g.silu(n1), g.param(rp.conv1.w), g.param(rp.conv1.b), 1, 1);
        V tp = g.linear(g.silu(temb), g.param(rp.time_w), g.param(rp.time_b));
        int out_ch = g.val(c).dim(0);
        c = g.add_chw_bias(c, g.reshape(tp, {out_ch}));
        c = g.group_norm(c, g.param(rp.gn2_g), g.param(rp.gn2_b), groups_for(out_ch));
        c = g.conv2d(g.silu(c), g.param(rp.conv2.w), g.param(rp.conv2.b), 1, 1);
        V sk = rp.has_skip ? g.conv2d(x, g.param(rp.skip.w), g.param(rp.skip.b), 1, 0) : x;
        return g.add(c, sk);
    };

    h = res_fwd(h, enc.res0);
    if (with_text) h = branch_cross_attn(g, h, text_tokens, enc.attn0, p.heads, nullptr);
    h = branch_cross_attn(g, h, face_tokens_flat, p.face0, p.heads, face_trace);
    V e0 = h;
    h = g.conv2d(h, g.param(enc.down0.w), g.param(enc.down0.b), 2, 1);
    h = res_fwd(h, enc.res1);
    if (with_text) h = branch_cross_attn(g, h, text_tokens, enc.attn1, p.heads, nullptr);
    h = branch_cross_attn(g, h, face_tokens_flat, p.face1, p.heads, face_trace);
    V e1 = h;
    h = g.conv2d(h, g.param(enc.down1.w), g.param(enc.down1.b), 2, 1);
    h = res_fwd(h, enc.res2);
    if (with_text) h = branch_cross_attn(g, h, text_tokens, enc.attn2, p.heads, nullptr);
    h = branch_cross_attn(g, h, face_tokens_flat, p.face2, p.heads, face_trace);
    V e2 = h;
    h = res_fwd(h, enc.mid1);
    if (with_text) h = branch_cross_attn(g, h, text_tokens, enc.mid_attn, p.heads, nullptr);
    h = branch_cross_attn(g, h, face_tokens_flat, p.face_mid, p.heads, face_trace);
    h = res_fwd(h, enc.mid2);

    ControlResiduals out;
    out.present = true;
    out.skip0 = g.scale(g.conv2d(e0, g.param(p.zero0.w), g.param(p.zero0.b), 1, 0), p.residual_gain);
    out.skip1 = g.scale(g.conv2d(e1, g.param(p.zero1.w), g.param(p.zero1.b), 1, 0), p.residual_gain);
    out.skip2 = g.scale(g.conv2d(e2, g.param(p.zero2.w), g.param(p.zero2.b), 1, 0), p.residual_gain);
    out.mid = g.scale(g.conv2d(h, g.param(p.zero_mid.w), g.param(p.zero_mid.b), 1, 0), p.residual_gain);
    return out;
}

ControlResidualValues hifinet_forward_values(const Tensor& z_t, int t, const Tensor& z_lmk,
                                             const Tensor& face_tokens_flat,
                                             const TextEmbedding* text, HiFiNetParams& p) {
    Graph g;
    ControlResiduals res = hifinet_forward(g, g.input(z_t), t, g.input(z_lmk),
                                           g.input(face_tokens_flat), text, p);
    ControlResidualValues out;
    out.present = true;
    out.skip0 = g.val(res.skip0);
    out.skip1 = g.val(res.skip1);
    out.skip2 = g.val(res.skip2);
    out.mid = g.val(res.mid);
    return out;
}

V denoise_with_injection(Graph& g, V z_t, int t, const TextEmbedding& text,
                         const ControlResiduals* res, UNetParams& p,
                         EncoderTaps* post_injection) {
    return denoise_graph(g, z_t, t, text, res, p, nullptr, nullptr, post_injection);
}

}  // namespace portrait
