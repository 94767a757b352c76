#pragma once

#include <string>
#include <vector>

#include "portrait/encoders.hpp"
#include "portrait/tensor.hpp"

namespace portrait {

// Multi-head attention parameter block (query/key/value/output projections).
// Keys carry no bias: a constant key offset shifts every score in a row
// equally and cancels in the softmax.
struct AttentionParams {
    ParamTensor wq, bq, wk, wv, bv, wo, bo;

    AttentionParams() = default;
    AttentionParams(const std::string& prefix, int d_q, int d_kv, int d, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
};

// Captured attention probabilities for inspection in tests. Each entry is a
// row-stochastic matrix (queries x keys).
struct AttnTrace {
    std::vector<Tensor> rows;
};

// Pre-norm transformer decoder block: self-attention over the query tokens,
// cross-attention to the reference features, then a GELU feed-forward.
struct DecoderLayerParams {
    ParamTensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttentionParams self_attn, cross_attn;
    ParamTensor ff_w1, ff_b1, ff_w2, ff_b2;

    DecoderLayerParams() = default;
    DecoderLayerParams(const std::string& prefix, int d, int ff_hidden, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
};

// Learnable face-token refiner: projects local/global features to a common
// width d and runs a decoder whose query is [global token | 32 learnable
// tokens], producing 33 tokens per reference. References never mix here;
// fusion happens downstream in the control branch.
struct RefinerParams {
    static constexpr int kLearnableTokens = 32;
    static constexpr int kFaceTokens = kLearnableTokens + 1;

    int d1 = 0, d2 = 0, d = 0, heads = 0, layers = 0;
    ParamTensor phi1_w, phi1_b;  // d2 -> d
    ParamTensor phi2_w, phi2_b;  // d1 -> d
    ParamTensor learn_tokens;    // 32 x d, init N(0, 0.02)
    std::vector<DecoderLayerParams> blocks;

    RefinerParams() = default;
    RefinerParams(int d1, int d2, int d, int heads, int layers, Rng& rng);
    void collect(std::vector<ParamTensor*>& out);
    void set_trainable(bool trainable);
};

struct FaceTokens {
    int n = 0, d = 0;
    Tensor tokens;  // N x 33 x d
};

V multihead_attention(Graph& g, V q_in, V k_in, V v_in, AttentionParams& p, int heads,
                      AttnTrace* trace = nullptr);

// Width projection of one reference: local T x d1 -> T x d, global 1 x d2 -> 1 x d.
std::pair<V, V> project_ref(Graph& g, V local, V global, RefinerParams& p);

// Decoder forward for one reference. local_p: T x d, global_p: 1 x d -> 33 x d.
V refine_ref(Graph& g, V local_p, V global_p, RefinerParams& p, AttnTrace* trace = nullptr);

// Graph-level batch: one output node per reference, in order.
std::vector<V> refine_graph(Graph& g, const LocalFeatures& local, const GlobalFeatures& global,
                            RefinerParams& p, AttnTrace* trace = nullptr);

// Value-level convenience used at inference.
FaceTokens refine_features(const LocalFeatures& local, const GlobalFeatures& global,
                           RefinerParams& p, AttnTrace* trace = nullptr);

// Row-major flatten N x 33 x d -> (N*33) x d and its inverse.
Tensor flatten_tokens(const FaceTokens& t);
FaceTokens unflatten_tokens(const Tensor& flat, int n, int d);
V flatten_tokens_graph(Graph& g, const std::vector<V>& per_ref);

// Feature-fusion ablation: which token set the control branch cross-attends to.
enum class FusionMode { LocalFeatures, GlobalFeatures, Concat, FaceRefiner };

FusionMode fusion_mode_from_string(const std::string& s);
std::string fusion_mode_to_string(FusionMode m);

// Tokens (graph nodes, one per reference) for the selected fusion mode. All
// modes project to width d first so the control branch sees a uniform width.
std::vector<V> fuse_reference_tokens(Graph& g, const LocalFeatures& local,
                                     const GlobalFeatures& global, RefinerParams& p,
                                     FusionMode mode, AttnTrace* trace = nullptr);

}  // namespace portrait
