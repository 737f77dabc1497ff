#include "kspace/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kspace {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

// log-softmax of v / tau
Vector log_softmax(const Vector& v, double tau) {
    const Vector z = v / tau;
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    return z.array() - lse;
}

std::vector<int> argsort_desc(const Vector& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
    return idx;
}

}  // namespace

DecoderParams DecoderParams::random(int h, std::mt19937_64& rng, int steps) {
    require(h >= 1 && steps >= 1, "decoder: width and waypoint count must be positive");
    DecoderParams p;
    p.encoder.w = uniform_init(2 * steps, h, h, rng);
    p.encoder.b = uniform_init(1, h, h, rng);
    p.interaction = AttentionParams::random(h, rng);
    p.offset_head = Mlp::random(h, h, 2 * steps, h, rng);
    p.logit_head = Mlp::random(h, h, 1, h, rng);
    return p;
}

void DecoderParams::validate() const {
    interaction.validate();
    const int h = width();
    require(encoder.w.cols() == h && encoder.b.rows() == 1 && encoder.b.cols() == h && encoder.w.rows() % 2 == 0,
            "decoder: encoder is " + shape(encoder.w) + " / " + shape(encoder.b));
    require(offset_head.w1.rows() == h && offset_head.w2.cols() == encoder.w.rows(),
            "decoder: offset head must map width " + std::to_string(h) + " to " + std::to_string(encoder.w.rows()));
    require(logit_head.w1.rows() == h && logit_head.w2.cols() == 1, "decoder: logit head must map width h to 1");
    require(temperature > 0.0 && std::isfinite(temperature), "decoder: temperature must be positive");
    require(top_k >= 1, "decoder: top_k must be at least 1");
}

std::vector<Matrix*> DecoderParams::tensors() {
    return {&encoder.w,     &encoder.b,     &interaction.wq, &interaction.wk, &interaction.wv, &interaction.wo,
            &offset_head.w1, &offset_head.b1, &offset_head.w2, &offset_head.b2, &logit_head.w1, &logit_head.b1,
            &logit_head.w2,  &logit_head.b2};
}

std::vector<const Matrix*> DecoderParams::tensors() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<DecoderParams*>(this)->tensors()) out.push_back(m);
    return out;
}

std::vector<std::string> DecoderParams::tensor_names() {
    return {"encoder.w",      "encoder.b",      "interaction.wq", "interaction.wk", "interaction.wv",
            "interaction.wo", "offset_head.w1", "offset_head.b1", "offset_head.w2", "offset_head.b2",
            "logit_head.w1",  "logit_head.b1",  "logit_head.w2",  "logit_head.b2"};
}

Matrix encode_anchors(const Matrix& anchors, const DecoderParams& p) {
    require(anchors.cols() == p.traj_dim(), "decoder: anchor dimension " + std::to_string(anchors.cols()) +
                                                " does not match the encoder's " + std::to_string(p.traj_dim()));
    const int steps = p.traj_dim() / 2;
    const Vector pe_mean = positional_encoding(steps, p.width()).colwise().mean();
    Matrix tokens = anchors * p.encoder.w / steps;
    tokens.rowwise() += p.encoder.b.row(0) + pe_mean.transpose();
    return tokens;
}

std::vector<int> top_k_indices(const Vector& probs, int k) {
    std::vector<int> idx = argsort_desc(probs);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 1))));
    return idx;
}

DecodeOutput decode(const Matrix& anchors, const Matrix& f_traj, const DecoderParams& p, DecodeCache* cache) {
    require(anchors.rows() >= 1, "decode: empty anchor set");
    require(f_traj.cols() == p.width(), "decode: trajectory features are " + shape(f_traj) + ", expected width " +
                                            std::to_string(p.width()));
    DecodeCache local;
    DecodeCache& c = cache ? *cache : local;
    c.anchors = anchors;
    c.tokens = encode_anchors(anchors, p);
    c.attended = attention_forward(c.tokens, f_traj, f_traj, p.interaction, &c.interaction) + c.tokens;

    DecodeOutput out;
    out.temperature = p.temperature;
    out.offsets = mlp_forward(c.attended, p.offset_head, &c.offset);
    out.trajs = anchors + out.offsets;
    out.logits = mlp_forward(c.attended, p.logit_head, &c.logit).col(0);
    out.probs = log_softmax(out.logits, p.temperature).array().exp();

    out.top = top_k_indices(out.probs, p.top_k);
    if (out.top.size() == 1) {
        out.selected = out.trajs.row(out.top[0]).transpose();
    } else {
        double mass = 0.0;
        out.selected = Vector::Zero(anchors.cols());
        for (int k : out.top) {
            out.selected += out.probs[k] * out.trajs.row(k).transpose();
            mass += out.probs[k];
        }
        out.selected /= mass;
    }
    return out;
}

DecoderGrads decode_backward(const DecodeCache& c, const DecoderParams& p, const Matrix& d_trajs,
                             const Vector& d_logits) {
    const Eigen::Index k = c.anchors.rows();
    require(d_trajs.rows() == k && d_trajs.cols() == c.anchors.cols() && d_logits.size() == k,
            "decode backward: gradient shapes do not match the cached forward pass");
    DecoderGrads g;
    const MlpGrads go = mlp_backward(c.offset, p.offset_head, d_trajs);
    const MlpGrads gl = mlp_backward(c.logit, p.logit_head, Matrix(d_logits));
    const Matrix d_att = go.d_x + gl.d_x;
    const AttentionGrads ga = attention_backward(c.interaction, p.interaction, d_att);

    const Matrix d_tokens = d_att + ga.d_q_in;
    const int steps = p.traj_dim() / 2;
    g.d.encoder.w = c.anchors.transpose() * d_tokens / steps;
    g.d.encoder.b = d_tokens.colwise().sum();
    g.d.interaction = ga.d;
    g.d.offset_head = go.d;
    g.d.logit_head = gl.d;
    g.d.temperature = p.temperature;
    g.d.top_k = p.top_k;
    g.d_f_traj = ga.d_k_in + ga.d_v_in;
    g.d_anchors = d_trajs + d_tokens * p.encoder.w.transpose() / steps;
    return g;
}

Vector target_probs(const Matrix& trajs, const Vector& y, double tau) {
    require(tau > 0.0, "target probabilities: tau must be positive");
    const Vector d = (trajs.rowwise() - y.transpose()).rowwise().norm();
    return log_softmax(-d, tau).array().exp();
}

double mean_smooth_l1(const Vector& residual) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < residual.size(); ++i) s += smooth_l1(residual[i]);
    return s / static_cast<double>(residual.size());
}

namespace {

struct LossParts {
    Vector dist, log_y, y_probs, log_p, smooth;
    int best = 0;
};

LossParts loss_parts(const DecodeOutput& out, const Vector& y, double tau) {
    require(out.trajs.rows() >= 1, "traj loss: empty prediction set");
    require(y.size() == out.trajs.cols(), "traj loss: target has " + std::to_string(y.size()) +
                                              " coordinates, predictions have " +
                                              std::to_string(out.trajs.cols()));
    require(tau > 0.0, "traj loss: tau must be positive");
    LossParts lp;
    const Eigen::Index k = out.trajs.rows();
    lp.dist.resize(k);
    lp.smooth.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        const Vector r = out.trajs.row(i).transpose() - y;
        lp.dist[i] = r.norm();
        lp.smooth[i] = mean_smooth_l1(r);
    }
    lp.log_y = log_softmax(-lp.dist, tau);
    lp.y_probs = lp.log_y.array().exp();
    lp.log_p = log_softmax(out.logits, out.temperature).cwiseMax(std::log(kProbFloor));
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < k; ++i)
        if (lp.dist[i] < lp.dist[best]) best = i;
    lp.best = static_cast<int>(best);
    return lp;
}

}  // namespace

LossBreakdown traj_loss(const DecodeOutput& out, const Vector& y, double tau) {
    const LossParts lp = loss_parts(out, y, tau);
    LossBreakdown l;
    for (Eigen::Index i = 0; i < lp.dist.size(); ++i) {
        if (lp.y_probs[i] > 0.0) l.l_prob += lp.y_probs[i] * (lp.log_y[i] - lp.log_p[i]);
        l.l_weighted += lp.y_probs[i] * lp.smooth[i];
    }
    l.l_prob = std::max(l.l_prob, 0.0);  // rounding can leave -1e-17
    l.l_best = lp.smooth[lp.best];
    l.finish();
    return l;
}

TrajLossGrads traj_loss_backward(const DecodeOutput& out, const Vector& y, double tau) {
    const LossParts lp = loss_parts(out, y, tau);
    const Eigen::Index k = lp.dist.size();
    const double n = static_cast<double>(y.size());
    TrajLossGrads g;
    g.d_trajs = Matrix::Zero(k, y.size());

    // l_prob through the predicted distribution; floored entries are constant.
    const double log_floor = std::log(kProbFloor);
    Vector g_logp(k);
    for (Eigen::Index i = 0; i < k; ++i) g_logp[i] = lp.log_p[i] > log_floor ? -lp.y_probs[i] : 0.0;
    const Vector p = log_softmax(out.logits, out.temperature).array().exp();
    g.d_logits = (g_logp - p * g_logp.sum()) / out.temperature;

    // l_prob and l_weighted through the target distribution Y = softmax(-d / tau).
    Vector a(k);
    for (Eigen::Index i = 0; i < k; ++i) a[i] = (lp.log_y[i] - lp.log_p[i]) + lp.smooth[i];
    const double mean_a = lp.y_probs.dot(a);
    for (Eigen::Index i = 0; i < k; ++i) {
        const Vector r = out.trajs.row(i).transpose() - y;
        const double d_s = lp.y_probs[i] * (a[i] - mean_a);
        if (lp.dist[i] > 0.0) g.d_trajs.row(i) += (-d_s / tau / lp.dist[i]) * r.transpose();
        for (Eigen::Index j = 0; j < r.size(); ++j) g.d_trajs(i, j) += lp.y_probs[i] * smooth_l1_grad(r[j]) / n;
    }
    // l_best through the closest row.
    for (Eigen::Index j = 0; j < y.size(); ++j)
        g.d_trajs(lp.best, j) += smooth_l1_grad(out.trajs(lp.best, j) - y[j]) / n;
    return g;
}

SpeedHead SpeedHead::random(int h, int classes, std::mt19937_64& rng) {
    require(classes >= 1, "speed head: need at least one class");
    return {uniform_init(h, classes, h, rng), uniform_init(1, classes, h, rng)};
}

namespace {

Vector speed_logits(const Matrix& f_speed, const SpeedHead& head, int target_class) {
    require(f_speed.rows() == 1 && f_speed.cols() == head.w.rows(),
            "speed loss: feature is " + shape(f_speed) + ", head expects 1x" + std::to_string(head.w.rows()));
    require(target_class >= 0 && target_class < head.classes(),
            "speed loss: class " + std::to_string(target_class) + " out of range [0, " +
                std::to_string(head.classes()) + ")");
    return (f_speed * head.w + head.b).row(0).transpose();
}

}  // namespace

double speed_loss(const Matrix& f_speed, const SpeedHead& head, int target_class) {
    return -log_softmax(speed_logits(f_speed, head, target_class), 1.0)[target_class];
}

SpeedGrads speed_loss_backward(const Matrix& f_speed, const SpeedHead& head, int target_class) {
    Vector d = log_softmax(speed_logits(f_speed, head, target_class), 1.0).array().exp();
    d[target_class] -= 1.0;
    SpeedGrads g;
    g.d.w = f_speed.transpose() * d.transpose();
    g.d.b = d.transpose();
    g.d_f_speed = d.transpose() * head.w.transpose();
    return g;
}

// ---- composed model ----

DrivingModel DrivingModel::random(int h, int speed_classes, int feature_dim, bool use_tfem, std::mt19937_64& rng) {
    DrivingModel m;
    m.decoder = DecoderParams::random(h, rng);
    m.speed = SpeedHead::random(h, speed_classes, rng);
    if (feature_dim > 0) m.ffem = EnhancerParams::random(h, feature_dim, rng);
    if (use_tfem) m.tfem = EnhancerParams::random(h, 2, rng);
    return m;
}

void DrivingModel::validate() const {
    decoder.validate();
    require(speed.w.rows() == width() && speed.b.rows() == 1 && speed.b.cols() == speed.w.cols(),
            "model: speed head is " + shape(speed.w) + " / " + shape(speed.b));
    if (ffem) {
        ffem->validate();
        require(ffem->width() == width(), "model: feature enhancer width differs from the decoder's");
    }
    if (tfem) {
        tfem->validate();
        require(tfem->width() == width() && tfem->projection.w.rows() == 2,
                "model: trajectory enhancer must have the decoder's width and a 2-d projection");
    }
}

std::vector<Matrix*> DrivingModel::tensors() {
    std::vector<Matrix*> out = decoder.tensors();
    for (Matrix* t : speed.tensors()) out.push_back(t);
    if (ffem)
        for (Matrix* t : ffem->tensors()) out.push_back(t);
    if (tfem)
        for (Matrix* t : tfem->tensors()) out.push_back(t);
    return out;
}

std::vector<const Matrix*> DrivingModel::tensors() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<DrivingModel*>(this)->tensors()) out.push_back(m);
    return out;
}

std::vector<std::string> DrivingModel::tensor_names() const {
    std::vector<std::string> out = DecoderParams::tensor_names();
    out.push_back("speed.w");
    out.push_back("speed.b");
    if (ffem)
        for (const auto& n : EnhancerParams::tensor_names()) out.push_back("ffem." + n);
    if (tfem)
        for (const auto& n : EnhancerParams::tensor_names()) out.push_back("tfem." + n);
    return out;
}

DrivingModel DrivingModel::zeros_like() const {
    DrivingModel z = *this;
    for (Matrix* t : z.tensors()) t->setZero();
    return z;
}

Matrix lift_feature(const Vector& feature, int h, int steps) {
    require(h >= 1 && feature.size() >= 1, "lift: empty feature or width");
    Eigen::RowVectorXd folded = Eigen::RowVectorXd::Zero(h);
    for (Eigen::Index j = 0; j < feature.size(); ++j) folded[j % h] += feature[j];
    Matrix out(steps + 1, h);
    out.topRows(steps) = positional_encoding(steps, h);
    out.topRows(steps).rowwise() += folded;
    out.row(steps) = folded;
    return out;
}

namespace {

struct ModelCache {
    FfemCache ffem;
    TfemCache tfem;
    DecodeCache decode;
    Matrix f_speed;
    DecodeOutput out;
};

LossBreakdown forward_cached(const DrivingModel& m, const KnowledgeAnchors& anchors, const Example& ex,
                             ModelCache& c) {
    require(ex.fused.cols() == m.width() && ex.fused.rows() >= 2,
            "model: example features are " + shape(ex.fused) + ", expected width " + std::to_string(m.width()));
    Matrix fused = ex.fused;
    if (m.ffem) fused = ffem_forward(fused, anchors.feature, *m.ffem, &c.ffem).fused;
    const Eigen::Index steps = fused.rows() - 1;
    Matrix f_traj = fused.topRows(steps);
    c.f_speed = fused.bottomRows(1);
    if (m.tfem) f_traj = tfem_forward(f_traj, anchors.trajectory, *m.tfem, &c.tfem);
    c.out = decode(anchors.trajectory, f_traj, m.decoder, &c.decode);
    LossBreakdown l = traj_loss(c.out, ex.target, m.decoder.temperature);
    l.l_speed = speed_loss(c.f_speed, m.speed, ex.speed_class);
    l.finish();
    return l;
}

void add_into(std::vector<Matrix*> dst, const std::vector<const Matrix*>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += *src[i];
}

}  // namespace

ForwardResult model_forward(const DrivingModel& m, const KnowledgeAnchors& anchors, const Example& ex) {
    ModelCache c;
    ForwardResult r;
    r.loss = forward_cached(m, anchors, ex, c);
    r.decode = std::move(c.out);
    return r;
}

LossBreakdown model_gradient(const DrivingModel& m, const KnowledgeAnchors& anchors, const Example& ex,
                             DrivingModel& grad) {
    ModelCache c;
    const LossBreakdown l = forward_cached(m, anchors, ex, c);
    grad = m.zeros_like();

    const TrajLossGrads tl = traj_loss_backward(c.out, ex.target, m.decoder.temperature);
    DecoderGrads dg = decode_backward(c.decode, m.decoder, tl.d_trajs, tl.d_logits);
    grad.decoder = std::move(dg.d);
    const SpeedGrads sg = speed_loss_backward(c.f_speed, m.speed, ex.speed_class);
    grad.speed = sg.d;

    Matrix d_traj = std::move(dg.d_f_traj);
    if (m.tfem) {
        ProjectedGrads tg = tfem_backward(c.tfem, *m.tfem, d_traj);
        grad.tfem = std::move(tg.d);
        d_traj = std::move(tg.d_input);
    }
    if (m.ffem) {
        Matrix d_fused(d_traj.rows() + 1, d_traj.cols());
        d_fused << d_traj, sg.d_f_speed;
        grad.ffem = ffem_backward(c.ffem, *m.ffem, d_fused).d;
    }
    return l;
}

LossBreakdown dataset_gradient(const DrivingModel& m, const KnowledgeAnchors& anchors,
                               const std::vector<Example>& data, DrivingModel* grad) {
    require(!data.empty(), "train: empty dataset");
    const int n = static_cast<int>(data.size());
    std::vector<LossBreakdown> losses(n);
    std::vector<DrivingModel> grads(grad ? n : 0);
    std::string error;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        try {
            if (grad)
                losses[i] = model_gradient(m, anchors, data[i], grads[i]);
            else
                losses[i] = model_forward(m, anchors, data[i]).loss;
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) error = e.what();
        }
    }
    if (!error.empty()) throw InvalidArgument(error);

    // Summed in dataset order for thread-count independence.
    LossBreakdown mean;
    for (const LossBreakdown& l : losses) {
        mean.l_prob += l.l_prob;
        mean.l_best += l.l_best;
        mean.l_weighted += l.l_weighted;
        mean.l_speed += l.l_speed;
    }
    mean.l_prob /= n;
    mean.l_best /= n;
    mean.l_weighted /= n;
    mean.l_speed /= n;
    mean.finish();
    if (grad) {
        *grad = m.zeros_like();
        for (const DrivingModel& g : grads) add_into(grad->tensors(), g.tensors());
        for (Matrix* t : grad->tensors()) *t /= n;
    }
    return mean;
}

TrainResult train_decoder(const std::vector<Example>& data, const KnowledgeAnchors& anchors, DrivingModel model,
                          const TrainConfig& config) {
    require(!data.empty(), "train: empty dataset");
    require(config.steps >= 0, "train: steps must be nonnegative");
    require(config.learning_rate >= 0.0 && std::isfinite(config.learning_rate),
            "train: learning rate must be finite and nonnegative");
    model.validate();
    TrainResult result;
    DrivingModel grad, m1 = model.zeros_like(), m2 = model.zeros_like();
    for (int step = 0; step <= config.steps; ++step) {
        const bool update = step < config.steps;
        const LossBreakdown l = dataset_gradient(model, anchors, data, update ? &grad : nullptr);
        if (!std::isfinite(l.total))
            throw NumericalError("train: non-finite loss at step " + std::to_string(step));
        result.trace.push_back({step, l});
        if (!update) break;

        std::vector<Matrix*> params = model.tensors();
        const std::vector<Matrix*> g = grad.tensors();
        if (!config.adam) {
            for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= config.learning_rate * *g[i];
            continue;
        }
        const std::vector<Matrix*> v1 = m1.tensors(), v2 = m2.tensors();
        const double c1 = 1.0 - std::pow(config.beta1, step + 1);
        const double c2 = 1.0 - std::pow(config.beta2, step + 1);
        for (std::size_t i = 0; i < params.size(); ++i) {
            *v1[i] = config.beta1 * *v1[i] + (1.0 - config.beta1) * *g[i];
            *v2[i] = config.beta2 * *v2[i] + (1.0 - config.beta2) * g[i]->cwiseAbs2();
            *params[i] -= (config.learning_rate *
                           ((*v1[i] / c1).array() / ((*v2[i] / c2).array().sqrt() + config.adam_eps)))
                              .matrix();
        }
    }
    result.model = std::move(model);
    return result;
}

double displacement_error(const Vector& a, const Vector& b) {
    require(a.size() == b.size() && a.size() % 2 == 0, "displacement: trajectories must be equal-length (x, y) lists");
    double s = 0.0;
    for (Eigen::Index t = 0; t < a.size() / 2; ++t) s += std::hypot(a[2 * t] - b[2 * t], a[2 * t + 1] - b[2 * t + 1]);
    return s / static_cast<double>(a.size() / 2);
}

EvalReport evaluate(const DrivingModel& m, const KnowledgeAnchors& anchors, const std::vector<Example>& data) {
    require(!data.empty(), "evaluate: empty dataset");
    const int n = static_cast<int>(data.size());
    EvalReport r;
    r.correct.assign(n, 0);
    r.displacement.assign(n, 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const DecodeOutput out = model_forward(m, anchors, data[i]).decode;
        const Vector d = (anchors.trajectory.rowwise() - data[i].target.transpose()).rowwise().norm();
        Eigen::Index nearest = 0;
        for (Eigen::Index k = 1; k < d.size(); ++k)
            if (d[k] < d[nearest]) nearest = k;
        r.correct[i] = out.top[0] == nearest;
        r.displacement[i] = displacement_error(out.selected, data[i].target);
    }
    for (int i = 0; i < n; ++i) {
        r.accuracy += r.correct[i];
        r.ade += r.displacement[i];
    }
    r.accuracy /= n;
    r.ade /= n;
    return r;
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "step,l_prob,l_best,l_weighted,l_speed,total\n";
    for (const TraceRow& r : trace)
        os << r.step << ',' << r.loss.l_prob << ',' << r.loss.l_best << ',' << r.loss.l_weighted << ','
           << r.loss.l_speed << ',' << r.loss.total << '\n';
    return os.str();
}

}  // namespace kspace
