#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kspace/numeric.hpp"

// Single-head scaled dot-product attention and the enhance-and-gate block
//   F_self  = Attn(F_in, F_in, F_in)
//   F_enhan = Attn(F_in, F_kn, F_kn) + F_in
//   w       = sigmoid(MLP_enh(F_enhan) + MLP_self(F_self))
//   F_out   = w * F_enhan + (1 - w) * F_in
// with analytic backward passes. Rows are tokens, columns are features.

namespace kspace {

/// Uniform(-1/sqrt(h), 1/sqrt(h)) matrix.
Matrix uniform_init(int rows, int cols, int h, std::mt19937_64& rng);

struct AttentionParams {
    Matrix wq, wk, wv, wo;

    static AttentionParams random(int h, std::mt19937_64& rng);
    static AttentionParams identity(int h);
    int width() const { return static_cast<int>(wq.rows()); }
    void validate() const;
    std::vector<Matrix*> tensors() { return {&wq, &wk, &wv, &wo}; }
};

struct AttentionCache {
    Matrix q_in, k_in, v_in;
    Matrix q, k, v;
    Matrix weights;  // n_q x n_k, rows on the simplex
    Matrix mixed;    // weights * v
};

/// softmax((Q_in Wq)(K_in Wk)^T / sqrt(h)) (V_in Wv) Wo.
Matrix attention_forward(const Matrix& q_in, const Matrix& k_in, const Matrix& v_in, const AttentionParams& p,
                         AttentionCache* cache = nullptr);

struct AttentionGrads {
    AttentionParams d;
    Matrix d_q_in, d_k_in, d_v_in;
};

AttentionGrads attention_backward(const AttentionCache& cache, const AttentionParams& p, const Matrix& d_out);

/// Two-layer perceptron x -> relu(x W1 + b1) W2 + b2, applied row-wise.
struct Mlp {
    Matrix w1, b1, w2, b2;  // biases are 1 x width rows

    static Mlp random(int in, int hidden, int out, int h, std::mt19937_64& rng);
    static Mlp zeros(int in, int hidden, int out);
    std::vector<Matrix*> tensors() { return {&w1, &b1, &w2, &b2}; }
};

struct MlpCache {
    Matrix x, pre;  // input and first-layer pre-activation
    Matrix hidden;
};

Matrix mlp_forward(const Matrix& x, const Mlp& m, MlpCache* cache = nullptr);

struct MlpGrads {
    Mlp d;
    Matrix d_x;
};

MlpGrads mlp_backward(const MlpCache& cache, const Mlp& m, const Matrix& d_out);

/// Affine map from raw anchor coordinates to width-h features. For the
/// feature enhancer `w` is D x h; for the trajectory enhancer it is 2 x h and
/// applies to each waypoint.
struct Projection {
    Matrix w, b;
    std::vector<Matrix*> tensors() { return {&w, &b}; }
};

struct EnhancerParams {
    AttentionParams self_attn;
    AttentionParams cross_attn;
    Mlp gate_enh;
    Mlp gate_self;
    Projection projection;

    /// `projection_in` is the anchor dimension (feature enhancer) or 2
    /// (trajectory enhancer).
    static EnhancerParams random(int h, int projection_in, std::mt19937_64& rng);
    int width() const { return self_attn.width(); }
    void validate() const;
    std::vector<Matrix*> tensors();
    std::vector<const Matrix*> tensors() const;
    /// Names in the order of tensors().
    static std::vector<std::string> tensor_names();
};

struct EnhanceCache {
    AttentionCache self, cross;
    MlpCache gate_enh, gate_self;
    Matrix input, cross_out, gate;
};

struct EnhanceOutput {
    Matrix output;
    Matrix gate;  // w, same shape as output
};

EnhanceOutput enhance_forward(const Matrix& input, const Matrix& knowledge, const EnhancerParams& p,
                              EnhanceCache* cache = nullptr);

struct EnhanceGrads {
    EnhancerParams d;  // projection gradients stay zero; the ffem/tfem wrappers fill them
    Matrix d_input;
    Matrix d_knowledge;
};

EnhanceGrads enhance_backward(const EnhanceCache& cache, const EnhancerParams& p, const Matrix& d_output);

/// Standard alternating sine/cosine encoding, steps x h.
Matrix positional_encoding(int steps, int h);

struct FfemOutput {
    Matrix fused;   // enhanced, same shape as the input
    Matrix traj;    // all rows but the last
    Matrix speed;   // last row
};

struct FfemCache {
    EnhanceCache enhance;
    Matrix anchors;
};

/// Feature enhancer: anchors (K x D) are projected to width h and used as
/// keys and values for the fused tokens.
FfemOutput ffem_forward(const Matrix& fused, const Matrix& anchors, const EnhancerParams& p,
                        FfemCache* cache = nullptr);

struct ProjectedGrads {
    EnhancerParams d;  // includes projection gradients
    Matrix d_input;
    Matrix d_anchors;
};

/// `d_fused` is the gradient with respect to the full enhanced output.
ProjectedGrads ffem_backward(const FfemCache& cache, const EnhancerParams& p, const Matrix& d_fused);

/// Expands trajectory anchors (K x 2T, time-major (x, y) pairs) into K*T
/// tokens: per-waypoint affine plus positional encoding, anchor-major order.
Matrix trajectory_tokens(const Matrix& anchors, const Projection& proj);

struct TfemCache {
    EnhanceCache enhance;
    Matrix anchors;
};

Matrix tfem_forward(const Matrix& traj, const Matrix& anchors, const EnhancerParams& p, TfemCache* cache = nullptr);

ProjectedGrads tfem_backward(const TfemCache& cache, const EnhancerParams& p, const Matrix& d_out);

}  // namespace kspace
