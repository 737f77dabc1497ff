#include "kspace/attention.hpp"

#include <cmath>

namespace kspace {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

Matrix zeros_like(const Matrix& m) { return Matrix::Zero(m.rows(), m.cols()); }

AttentionParams zeros_like(const AttentionParams& p) {
    return {zeros_like(p.wq), zeros_like(p.wk), zeros_like(p.wv), zeros_like(p.wo)};
}

Mlp zeros_like(const Mlp& m) { return {zeros_like(m.w1), zeros_like(m.b1), zeros_like(m.w2), zeros_like(m.b2)}; }

EnhancerParams zeros_like(const EnhancerParams& p) {
    return {zeros_like(p.self_attn), zeros_like(p.cross_attn), zeros_like(p.gate_enh), zeros_like(p.gate_self),
            {zeros_like(p.projection.w), zeros_like(p.projection.b)}};
}

Matrix sigmoid(const Matrix& x) {
    return x.unaryExpr([](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

Matrix project(const Matrix& x, const Projection& p) { return (x * p.w).rowwise() + p.b.row(0); }

}  // namespace

Matrix uniform_init(int rows, int cols, int h, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = u(rng);
    return m;
}

AttentionParams AttentionParams::random(int h, std::mt19937_64& rng) {
    AttentionParams p;
    p.wq = uniform_init(h, h, h, rng);
    p.wk = uniform_init(h, h, h, rng);
    p.wv = uniform_init(h, h, h, rng);
    p.wo = uniform_init(h, h, h, rng);
    return p;
}

AttentionParams AttentionParams::identity(int h) {
    const Matrix eye = Matrix::Identity(h, h);
    return {eye, eye, eye, eye};
}

void AttentionParams::validate() const {
    const int h = width();
    require(h > 0, "attention: empty weights");
    for (const Matrix* m : {&wq, &wk, &wv, &wo})
        require(m->rows() == h && m->cols() == h, "attention: weights must all be " + std::to_string(h) + "x" +
                                                      std::to_string(h) + ", found " + shape(*m));
}

Matrix attention_forward(const Matrix& q_in, const Matrix& k_in, const Matrix& v_in, const AttentionParams& p,
                         AttentionCache* cache) {
    const int h = p.width();
    require(q_in.cols() == h && k_in.cols() == h && v_in.cols() == h,
            "attention: input widths " + shape(q_in) + ", " + shape(k_in) + ", " + shape(v_in) +
                " do not match width " + std::to_string(h));
    require(k_in.rows() == v_in.rows() && k_in.rows() > 0, "attention: keys and values need the same, nonzero, row count");
    const Matrix q = q_in * p.wq;
    const Matrix k = k_in * p.wk;
    const Matrix v = v_in * p.wv;
    Matrix a = (q * k.transpose()) / std::sqrt(static_cast<double>(h));
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double mx = a.row(i).maxCoeff();
        a.row(i) = (a.row(i).array() - mx).exp();
        a.row(i) /= a.row(i).sum();
    }
    const Matrix mixed = a * v;
    Matrix out = mixed * p.wo;
    if (cache) *cache = {q_in, k_in, v_in, q, k, v, a, mixed};
    return out;
}

AttentionGrads attention_backward(const AttentionCache& c, const AttentionParams& p, const Matrix& d_out) {
    require(d_out.rows() == c.weights.rows() && d_out.cols() == p.width(),
            "attention backward: upstream gradient is " + shape(d_out) + ", expected " +
                std::to_string(c.weights.rows()) + "x" + std::to_string(p.width()));
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.width()));
    AttentionGrads g;
    g.d.wo = c.mixed.transpose() * d_out;
    const Matrix d_mixed = d_out * p.wo.transpose();
    const Matrix d_a = d_mixed * c.v.transpose();
    const Matrix d_v = c.weights.transpose() * d_mixed;
    const Eigen::VectorXd row_dot = (d_a.array() * c.weights.array()).rowwise().sum();
    const Matrix d_s = c.weights.array() * (d_a.colwise() - row_dot).array();
    const Matrix d_q = d_s * c.k * scale;
    const Matrix d_k = d_s.transpose() * c.q * scale;
    g.d.wq = c.q_in.transpose() * d_q;
    g.d.wk = c.k_in.transpose() * d_k;
    g.d.wv = c.v_in.transpose() * d_v;
    g.d_q_in = d_q * p.wq.transpose();
    g.d_k_in = d_k * p.wk.transpose();
    g.d_v_in = d_v * p.wv.transpose();
    return g;
}

Mlp Mlp::random(int in, int hidden, int out, int h, std::mt19937_64& rng) {
    return {uniform_init(in, hidden, h, rng), uniform_init(1, hidden, h, rng), uniform_init(hidden, out, h, rng),
            uniform_init(1, out, h, rng)};
}

Mlp Mlp::zeros(int in, int hidden, int out) {
    return {Matrix::Zero(in, hidden), Matrix::Zero(1, hidden), Matrix::Zero(hidden, out), Matrix::Zero(1, out)};
}

Matrix mlp_forward(const Matrix& x, const Mlp& m, MlpCache* cache) {
    require(x.cols() == m.w1.rows(), "mlp: input width " + std::to_string(x.cols()) + ", expected " +
                                         std::to_string(m.w1.rows()));
    const Matrix pre = (x * m.w1).rowwise() + m.b1.row(0);
    const Matrix hidden = pre.cwiseMax(0.0);
    Matrix out = (hidden * m.w2).rowwise() + m.b2.row(0);
    if (cache) *cache = {x, pre, hidden};
    return out;
}

MlpGrads mlp_backward(const MlpCache& c, const Mlp& m, const Matrix& d_out) {
    MlpGrads g;
    g.d.w2 = c.hidden.transpose() * d_out;
    g.d.b2 = d_out.colwise().sum();
    const Matrix d_hidden = d_out * m.w2.transpose();
    const Matrix d_pre = d_hidden.array() * (c.pre.array() > 0.0).cast<double>();
    g.d.w1 = c.x.transpose() * d_pre;
    g.d.b1 = d_pre.colwise().sum();
    g.d_x = d_pre * m.w1.transpose();
    return g;
}

EnhancerParams EnhancerParams::random(int h, int projection_in, std::mt19937_64& rng) {
    EnhancerParams p;
    p.self_attn = AttentionParams::random(h, rng);
    p.cross_attn = AttentionParams::random(h, rng);
    p.gate_enh = Mlp::random(h, h, h, h, rng);
    p.gate_self = Mlp::random(h, h, h, h, rng);
    p.projection = {uniform_init(projection_in, h, h, rng), uniform_init(1, h, h, rng)};
    return p;
}

void EnhancerParams::validate() const {
    self_attn.validate();
    cross_attn.validate();
    const int h = width();
    require(cross_attn.width() == h, "enhancer: attention widths differ");
    for (const Mlp* m : {&gate_enh, &gate_self})
        require(m->w1.rows() == h && m->w2.cols() == h && m->b1.cols() == m->w1.cols() && m->b2.cols() == h,
                "enhancer: gate MLP shapes do not match width " + std::to_string(h));
    require(projection.w.cols() == h && projection.b.rows() == 1 && projection.b.cols() == h,
            "enhancer: projection must map to width " + std::to_string(h));
}

std::vector<Matrix*> EnhancerParams::tensors() {
    std::vector<Matrix*> out;
    for (auto* group : {&self_attn, &cross_attn})
        for (Matrix* m : group->tensors()) out.push_back(m);
    for (auto* group : {&gate_enh, &gate_self})
        for (Matrix* m : group->tensors()) out.push_back(m);
    for (Matrix* m : projection.tensors()) out.push_back(m);
    return out;
}

std::vector<const Matrix*> EnhancerParams::tensors() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<EnhancerParams*>(this)->tensors()) out.push_back(m);
    return out;
}

std::vector<std::string> EnhancerParams::tensor_names() {
    return {"self_attn.wq", "self_attn.wk", "self_attn.wv", "self_attn.wo", "cross_attn.wq", "cross_attn.wk",
            "cross_attn.wv", "cross_attn.wo", "gate_enh.w1", "gate_enh.b1", "gate_enh.w2", "gate_enh.b2",
            "gate_self.w1", "gate_self.b1", "gate_self.w2", "gate_self.b2", "projection.w", "projection.b"};
}

EnhanceOutput enhance_forward(const Matrix& input, const Matrix& knowledge, const EnhancerParams& p,
                              EnhanceCache* cache) {
    require(input.cols() == p.width() && knowledge.cols() == p.width(),
            "enhance: input " + shape(input) + " and knowledge " + shape(knowledge) + " must have width " +
                std::to_string(p.width()));
    EnhanceCache local;
    EnhanceCache& c = cache ? *cache : local;
    const Matrix self = attention_forward(input, input, input, p.self_attn, &c.self);
    c.cross_out = attention_forward(input, knowledge, knowledge, p.cross_attn, &c.cross);
    const Matrix enhanced = c.cross_out + input;
    const Matrix logits = mlp_forward(enhanced, p.gate_enh, &c.gate_enh) + mlp_forward(self, p.gate_self, &c.gate_self);
    c.gate = sigmoid(logits);
    c.input = input;
    EnhanceOutput out;
    out.output = input + c.gate.cwiseProduct(c.cross_out);
    out.gate = c.gate;
    return out;
}

EnhanceGrads enhance_backward(const EnhanceCache& c, const EnhancerParams& p, const Matrix& d_output) {
    require(d_output.rows() == c.input.rows() && d_output.cols() == c.input.cols(),
            "enhance backward: upstream gradient is " + shape(d_output) + ", expected " + shape(c.input));
    EnhanceGrads g;
    g.d = zeros_like(p);

    // F_out = F_in + w * C,  C = cross-attention output.
    Matrix d_input = d_output;
    Matrix d_cross = c.gate.cwiseProduct(d_output);
    const Matrix d_logits = c.cross_out.cwiseProduct(d_output).cwiseProduct(
        (c.gate.array() * (1.0 - c.gate.array())).matrix());

    const MlpGrads ge = mlp_backward(c.gate_enh, p.gate_enh, d_logits);
    const MlpGrads gs = mlp_backward(c.gate_self, p.gate_self, d_logits);
    g.d.gate_enh = ge.d;
    g.d.gate_self = gs.d;
    // F_enhan = C + F_in
    d_cross += ge.d_x;
    d_input += ge.d_x;

    const AttentionGrads sa = attention_backward(c.self, p.self_attn, gs.d_x);
    g.d.self_attn = sa.d;
    d_input += sa.d_q_in + sa.d_k_in + sa.d_v_in;

    const AttentionGrads ca = attention_backward(c.cross, p.cross_attn, d_cross);
    g.d.cross_attn = ca.d;
    d_input += ca.d_q_in;
    g.d_knowledge = ca.d_k_in + ca.d_v_in;
    g.d_input = std::move(d_input);
    return g;
}

Matrix positional_encoding(int steps, int h) {
    Matrix pe(steps, h);
    for (int t = 0; t < steps; ++t) {
        for (int i = 0; i < h; ++i) {
            const int pair = i - (i % 2);
            const double freq = std::pow(10000.0, -static_cast<double>(pair) / h);
            pe(t, i) = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
        }
    }
    return pe;
}

FfemOutput ffem_forward(const Matrix& fused, const Matrix& anchors, const EnhancerParams& p, FfemCache* cache) {
    require(fused.rows() >= 2, "ffem: fused features need at least two rows (trajectory rows plus speed)");
    require(anchors.rows() >= 1, "ffem: no anchors");
    require(anchors.cols() == p.projection.w.rows(), "ffem: anchor dimension " + std::to_string(anchors.cols()) +
                                                         " does not match projection input " +
                                                         std::to_string(p.projection.w.rows()));
    const Matrix knowledge = project(anchors, p.projection);
    FfemOutput out;
    out.fused = enhance_forward(fused, knowledge, p, cache ? &cache->enhance : nullptr).output;
    out.traj = out.fused.topRows(out.fused.rows() - 1);
    out.speed = out.fused.bottomRows(1);
    if (cache) cache->anchors = anchors;
    return out;
}

ProjectedGrads ffem_backward(const FfemCache& cache, const EnhancerParams& p, const Matrix& d_fused) {
    EnhanceGrads g = enhance_backward(cache.enhance, p, d_fused);
    ProjectedGrads out;
    out.d = std::move(g.d);
    out.d.projection.w = cache.anchors.transpose() * g.d_knowledge;
    out.d.projection.b = g.d_knowledge.colwise().sum();
    out.d_input = std::move(g.d_input);
    out.d_anchors = g.d_knowledge * p.projection.w.transpose();
    return out;
}

Matrix trajectory_tokens(const Matrix& anchors, const Projection& proj) {
    require(anchors.cols() % 2 == 0, "tfem: anchor dimension must be even (x, y pairs), found " +
                                         std::to_string(anchors.cols()));
    require(proj.w.rows() == 2, "tfem: projection must take 2-d waypoints");
    const int steps = static_cast<int>(anchors.cols()) / 2;
    const int h = static_cast<int>(proj.w.cols());
    const Matrix pe = positional_encoding(steps, h);
    Matrix tokens(anchors.rows() * steps, h);
    for (Eigen::Index k = 0; k < anchors.rows(); ++k)
        for (int t = 0; t < steps; ++t)
            tokens.row(k * steps + t) = anchors(k, 2 * t) * proj.w.row(0) + anchors(k, 2 * t + 1) * proj.w.row(1) +
                                        proj.b.row(0) + pe.row(t);
    return tokens;
}

Matrix tfem_forward(const Matrix& traj, const Matrix& anchors, const EnhancerParams& p, TfemCache* cache) {
    require(anchors.rows() >= 1, "tfem: no anchors");
    const Matrix tokens = trajectory_tokens(anchors, p.projection);
    Matrix out = enhance_forward(traj, tokens, p, cache ? &cache->enhance : nullptr).output;
    if (cache) cache->anchors = anchors;
    return out;
}

ProjectedGrads tfem_backward(const TfemCache& cache, const EnhancerParams& p, const Matrix& d_out) {
    EnhanceGrads g = enhance_backward(cache.enhance, p, d_out);
    const int steps = static_cast<int>(cache.anchors.cols()) / 2;
    ProjectedGrads out;
    out.d = std::move(g.d);
    out.d.projection.w = Matrix::Zero(2, p.width());
    out.d.projection.b = g.d_knowledge.colwise().sum();
    out.d_anchors = Matrix::Zero(cache.anchors.rows(), cache.anchors.cols());
    for (Eigen::Index k = 0; k < cache.anchors.rows(); ++k) {
        for (int t = 0; t < steps; ++t) {
            const auto d_tok = g.d_knowledge.row(k * steps + t);
            out.d.projection.w.row(0) += cache.anchors(k, 2 * t) * d_tok;
            out.d.projection.w.row(1) += cache.anchors(k, 2 * t + 1) * d_tok;
            out.d_anchors(k, 2 * t) = d_tok.dot(p.projection.w.row(0));
            out.d_anchors(k, 2 * t + 1) = d_tok.dot(p.projection.w.row(1));
        }
    }
    out.d_input = std::move(g.d_input);
    return out;
}

}  // namespace kspace
