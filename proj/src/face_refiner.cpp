#include "portrait/face_refiner.hpp"

#include <cmath>

#include "portrait/errors.hpp"

namespace portrait {

namespace {
ParamTensor make_linear_w(const std::string& name, int in, int out, Rng& rng) {
    return ParamTensor(name, Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
}
ParamTensor make_zeros(const std::string& name, std::vector<int> shape) {
    return ParamTensor(name, Tensor::zeros(std::move(shape)));
}
ParamTensor make_ones(const std::string& name, std::vector<int> shape) {
    return ParamTensor(name, Tensor::full(std::move(shape), 1.0));
}
}  // namespace

AttentionParams::AttentionParams(const std::string& prefix, int d_q, int d_kv, int d, Rng& rng)
    : wq(make_linear_w(prefix + ".wq", d_q, d, rng)),
      bq(make_zeros(prefix + ".bq", {d})),
      wk(make_linear_w(prefix + ".wk", d_kv, d, rng)),
      wv(make_linear_w(prefix + ".wv", d_kv, d, rng)),
      bv(make_zeros(prefix + ".bv", {d})),
      wo(make_linear_w(prefix + ".wo", d, d, rng)),
      bo(make_zeros(prefix + ".bo", {d})) {}

void AttentionParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&wq, &bq, &wk, &wv, &bv, &wo, &bo}) out.push_back(p);
}

DecoderLayerParams::DecoderLayerParams(const std::string& prefix, int d, int ff_hidden, Rng& rng)
    : ln1_g(make_ones(prefix + ".ln1.g", {d})),
      ln1_b(make_zeros(prefix + ".ln1.b", {d})),
      ln2_g(make_ones(prefix + ".ln2.g", {d})),
      ln2_b(make_zeros(prefix + ".ln2.b", {d})),
      ln3_g(make_ones(prefix + ".ln3.g", {d})),
      ln3_b(make_zeros(prefix + ".ln3.b", {d})),
      self_attn(prefix + ".self", d, d, d, rng),
      cross_attn(prefix + ".cross", d, d, d, rng),
      ff_w1(make_linear_w(prefix + ".ff.w1", d, ff_hidden, rng)),
      ff_b1(make_zeros(prefix + ".ff.b1", {ff_hidden})),
      ff_w2(make_linear_w(prefix + ".ff.w2", ff_hidden, d, rng)),
      ff_b2(make_zeros(prefix + ".ff.b2", {d})) {}

void DecoderLayerParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&ln1_g, &ln1_b, &ln2_g, &ln2_b, &ln3_g, &ln3_b}) out.push_back(p);
    self_attn.collect(out);
    cross_attn.collect(out);
    for (ParamTensor* p : {&ff_w1, &ff_b1, &ff_w2, &ff_b2}) out.push_back(p);
}

RefinerParams::RefinerParams(int d1_, int d2_, int d_, int heads_, int layers_, Rng& rng)
    : d1(d1_), d2(d2_), d(d_), heads(heads_), layers(layers_) {
    phi1_w = make_linear_w("refiner.phi1.w", d2, d, rng);
    phi1_b = make_zeros("refiner.phi1.b", {d});
    phi2_w = make_linear_w("refiner.phi2.w", d1, d, rng);
    phi2_b = make_zeros("refiner.phi2.b", {d});
    learn_tokens = ParamTensor("refiner.tokens", Tensor::randn({kLearnableTokens, d}, rng, 0.02));
    for (int l = 0; l < layers; ++l)
        blocks.emplace_back("refiner.block" + std::to_string(l), d, 4 * d, rng);
}

void RefinerParams::collect(std::vector<ParamTensor*>& out) {
    for (ParamTensor* p : {&phi1_w, &phi1_b, &phi2_w, &phi2_b, &learn_tokens}) out.push_back(p);
    for (auto& b : blocks) b.collect(out);
}

void RefinerParams::set_trainable(bool trainable) {
    std::vector<ParamTensor*> all;
    collect(all);
    for (ParamTensor* p : all) p->trainable = trainable;
}

V multihead_attention(Graph& g, V q_in, V k_in, V v_in, AttentionParams& p, int heads,
                      AttnTrace* trace) {
    V q = g.linear(q_in, g.param(p.wq), g.param(p.bq));
    V k = g.matmul(k_in, g.param(p.wk));
    V v = g.linear(v_in, g.param(p.wv), g.param(p.bv));
    const int d = g.val(q).dim(1);
    if (d % heads != 0) raise(ErrorCode::DimensionMismatch, "attention width not divisible by heads");
    const int dh = d / heads;
    std::vector<V> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        V qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        V kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        V vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        V scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        V probs = g.softmax_rows(scores);
        if (trace) trace->rows.push_back(g.val(probs));
        head_outs.push_back(g.matmul(probs, vh));
    }
    V merged = heads == 1 ? head_outs[0] : g.concat_cols(head_outs);
    return g.linear(merged, g.param(p.wo), g.param(p.bo));
}

std::pair<V, V> project_ref(Graph& g, V local, V global, RefinerParams& p) {
    const Tensor& tl = g.val(local);
    const Tensor& tg = g.val(global);
    if (tl.ndim() != 2 || tl.dim(1) != p.d1)
        raise(ErrorCode::DimensionMismatch, "project: local width != d1");
    if (tg.ndim() != 2 || tg.dim(0) != 1 || tg.dim(1) != p.d2)
        raise(ErrorCode::DimensionMismatch, "project: global must be 1 x d2");
    V local_p = g.linear(local, g.param(p.phi2_w), g.param(p.phi2_b));
    V global_p = g.linear(global, g.param(p.phi1_w), g.param(p.phi1_b));
    return {local_p, global_p};
}

V refine_ref(Graph& g, V local_p, V global_p, RefinerParams& p, AttnTrace* trace) {
    if (g.val(local_p).dim(1) != p.d || g.val(global_p).dim(1) != p.d)
        raise(ErrorCode::DimensionMismatch, "refine: projected width != d");
    V q = g.concat_rows({global_p, g.param(p.learn_tokens)});     // 33 x d
    V kv = g.concat_rows({global_p, local_p});                    // (1+T) x d
    V x = q;
    for (auto& blk : p.blocks) {
        V n1 = g.layer_norm(x, g.param(blk.ln1_g), g.param(blk.ln1_b));
        x = g.add(x, multihead_attention(g, n1, n1, n1, blk.self_attn, p.heads, trace));
        V n2 = g.layer_norm(x, g.param(blk.ln2_g), g.param(blk.ln2_b));
        x = g.add(x, multihead_attention(g, n2, kv, kv, blk.cross_attn, p.heads, trace));
        V n3 = g.layer_norm(x, g.param(blk.ln3_g), g.param(blk.ln3_b));
        V ff = g.linear(g.gelu(g.linear(n3, g.param(blk.ff_w1), g.param(blk.ff_b1))),
                        g.param(blk.ff_w2), g.param(blk.ff_b2));
        x = g.add(x, ff);
    }
    return x;
}

namespace {
// Extracts reference r of a feature batch as 2-D constant nodes.
V local_slice(Graph& g, const LocalFeatures& local, int r) {
    Tensor t({local.t_local, local.d1});
    for (int a = 0; a < local.t_local; ++a)
        for (int b = 0; b < local.d1; ++b) t.at2(a, b) = local.tokens.at3(r, a, b);
    return g.input(std::move(t));
}
V global_slice(Graph& g, const GlobalFeatures& global, int r) {
    Tensor t({1, global.d2});
    for (int b = 0; b < global.d2; ++b) t.at2(0, b) = global.embedding.at3(r, 0, b);
    return g.input(std::move(t));
}
}  // namespace

std::vector<V> refine_graph(Graph& g, const LocalFeatures& local, const GlobalFeatures& global,
                            RefinerParams& p, AttnTrace* trace) {
    if (local.n != global.n) raise(ErrorCode::DimensionMismatch, "refine: N mismatch");
    std::vector<V> out;
    out.reserve(local.n);
    for (int r = 0; r < local.n; ++r) {
        auto [lp, gp] = project_ref(g, local_slice(g, local, r), global_slice(g, global, r), p);
        out.push_back(refine_ref(g, lp, gp, p, trace));
    }
    return out;
}

FaceTokens refine_features(const LocalFeatures& local, const GlobalFeatures& global,
                           RefinerParams& p, AttnTrace* trace) {
    Graph g;
    std::vector<V> per_ref = refine_graph(g, local, global, p, trace);
    FaceTokens out;
    out.n = local.n;
    out.d = p.d;
    out.tokens = Tensor::zeros({out.n, RefinerParams::kFaceTokens, p.d});
    for (int r = 0; r < out.n; ++r) {
        const Tensor& t = g.val(per_ref[r]);
        for (int a = 0; a < RefinerParams::kFaceTokens; ++a)
            for (int b = 0; b < p.d; ++b) out.tokens.at3(r, a, b) = t.at2(a, b);
    }
    return out;
}

Tensor flatten_tokens(const FaceTokens& t) {
    Tensor out({t.n * t.tokens.dim(1), t.d});
    std::copy(t.tokens.data.begin(), t.tokens.data.end(), out.data.begin());
    return out;
}

FaceTokens unflatten_tokens(const Tensor& flat, int n, int d) {
    if (flat.ndim() != 2 || flat.dim(1) != d || flat.dim(0) % n != 0)
        raise(ErrorCode::DimensionMismatch, "unflatten: shape mismatch");
    FaceTokens out;
    out.n = n;
    out.d = d;
    out.tokens = Tensor::zeros({n, flat.dim(0) / n, d});
    std::copy(flat.data.begin(), flat.data.end(), out.tokens.data.begin());
    return out;
}

V flatten_tokens_graph(Graph& g, const std::vector<V>& per_ref) {
    if (per_ref.size() == 1) return per_ref[0];
    return g.concat_rows(per_ref);
}

FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "local") return FusionMode::LocalFeatures;
    if (s == "global") return FusionMode::GlobalFeatures;
    if (s == "concat") return FusionMode::Concat;
    if (s == "face-refiner") return FusionMode::FaceRefiner;
    raise(ErrorCode::ConfigError, "unknown fusion mode: " + s);
}

std::string fusion_mode_to_string(FusionMode m) {
    switch (m) {
        case FusionMode::LocalFeatures: return "local";
        case FusionMode::GlobalFeatures: return "global";
        case FusionMode::Concat: return "concat";
        case FusionMode::FaceRefiner: return "face-refiner";
    }
    return "?";
}

std::vector<V> fuse_reference_tokens(Graph& g, const LocalFeatures& local,
                                     const GlobalFeatures& global, RefinerParams& p,
                                     FusionMode mode, AttnTrace* trace) {
    if (local.n != global.n) raise(ErrorCode::DimensionMismatch, "fuse: N mismatch");
    std::vector<V> out;
    out.reserve(local.n);
    for (int r = 0; r < local.n; ++r) {
        auto [lp, gp] = project_ref(g, local_slice(g, local, r), global_slice(g, global, r), p);
        switch (mode) {
            case FusionMode::LocalFeatures: out.push_back(lp); break;
            case FusionMode::GlobalFeatures: out.push_back(gp); break;
            case FusionMode::Concat: out.push_back(g.concat_rows({gp, lp})); break;
            case FusionMode::FaceRefiner: out.push_back(refine_ref(g, lp, gp, p, trace)); break;
        }
    }
    return out;
}

}  // namespace portrait
