#include "kspace/gradcheck_suite.hpp"

#include <random>

#include "kspace/decoder.hpp"

namespace kspace {

namespace {

Matrix gauss(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = g(rng);
    return m;
}

struct Case {
    std::vector<NamedTensor> params;
    std::vector<Matrix> analytic;

    void add(const std::string& name, Matrix* value, const Matrix& grad) {
        params.push_back({name, value});
        analytic.push_back(grad);
    }
    template <class P, class D>
    void add_all(const std::string& prefix, const std::vector<std::string>& names, P& p, D d) {
        const auto ts = p.tensors();
        const auto gs = d.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) add(prefix + names[i], ts[i], *gs[i]);
    }
};

class Runner {
  public:
    explicit Runner(const GradSuiteOptions& o) : opt_(o) {}

    void run(const std::string& check, const std::function<double()>& loss, Case c) {
        if (opt_.corrupt && !c.analytic.empty() && c.analytic[0].size() > 0)
            c.analytic[0](0, 0) += 1e-2 * std::max(1.0, c.analytic[0].norm());
        const GradCheckReport r = check_gradients(loss, c.params, c.analytic, opt_.step);
        for (const GradCheckEntry& e : r.entries)
            rows.push_back({check, e.name, e.rel_error, e.rel_error <= opt_.tolerance});
    }

    std::vector<GradSuiteRow> rows;

  private:
    GradSuiteOptions opt_;
};

}  // namespace

std::vector<GradSuiteRow> run_gradcheck_suite(const GradSuiteOptions& o) {
    if (o.width < 2 || o.width % 2 != 0) throw InvalidArgument("gradcheck: width must be even and >= 2");
    if (o.traj_anchors < 1 || o.feature_anchors < 1 || o.feature_dim < 1)
        throw InvalidArgument("gradcheck: anchor counts and feature_dim must be positive");
    if (!(o.step > 0.0) || !(o.tolerance > 0.0)) throw InvalidArgument("gradcheck: step and tolerance must be positive");
    std::mt19937_64 rng(o.seed);
    const int h = o.width;
    Runner run(o);

    {
        AttentionParams p = AttentionParams::random(h, rng);
        Matrix q = gauss(rng, 5, h), k = gauss(rng, 7, h), v = gauss(rng, 7, h);
        const Matrix g = gauss(rng, 5, h);
        AttentionCache cache;
        attention_forward(q, k, v, p, &cache);
        const AttentionGrads ag = attention_backward(cache, p, g);
        Case c;
        c.add("wq", &p.wq, ag.d.wq);
        c.add("wk", &p.wk, ag.d.wk);
        c.add("wv", &p.wv, ag.d.wv);
        c.add("wo", &p.wo, ag.d.wo);
        c.add("q_in", &q, ag.d_q_in);
        c.add("k_in", &k, ag.d_k_in);
        c.add("v_in", &v, ag.d_v_in);
        run.run("attention", [&] { return attention_forward(q, k, v, p).cwiseProduct(g).sum(); }, c);
    }
    {
        Mlp m = Mlp::random(h, h, h, h, rng);
        Matrix x = gauss(rng, 6, h);
        const Matrix g = gauss(rng, 6, h);
        MlpCache cache;
        mlp_forward(x, m, &cache);
        const MlpGrads mg = mlp_backward(cache, m, g);
        Case c;
        c.add_all("", {"w1", "b1", "w2", "b2"}, m, mg.d);
        c.add("x", &x, mg.d_x);
        run.run("mlp", [&] { return mlp_forward(x, m).cwiseProduct(g).sum(); }, c);
    }
    {
        EnhancerParams p = EnhancerParams::random(h, h, rng);
        Matrix in = gauss(rng, 6, h), kn = gauss(rng, 4, h);
        const Matrix g = gauss(rng, 6, h);
        EnhanceCache cache;
        enhance_forward(in, kn, p, &cache);
        const EnhanceGrads eg = enhance_backward(cache, p, g);
        Case c;
        c.add_all("", EnhancerParams::tensor_names(), p, eg.d);
        // projection is not used by the bare block
        c.params.resize(c.params.size() - 2);
        c.analytic.resize(c.analytic.size() - 2);
        c.add("input", &in, eg.d_input);
        c.add("knowledge", &kn, eg.d_knowledge);
        run.run("enhance", [&] { return enhance_forward(in, kn, p).output.cwiseProduct(g).sum(); }, c);
    }
    {
        EnhancerParams p = EnhancerParams::random(h, o.feature_dim, rng);
        Matrix fused = gauss(rng, 11, h), anchors = gauss(rng, o.feature_anchors, o.feature_dim);
        const Matrix g = gauss(rng, 11, h);
        FfemCache cache;
        ffem_forward(fused, anchors, p, &cache);
        const ProjectedGrads pg = ffem_backward(cache, p, g);
        Case c;
        c.add_all("", EnhancerParams::tensor_names(), p, pg.d);
        c.add("fused", &fused, pg.d_input);
        c.add("anchors", &anchors, pg.d_anchors);
        run.run("ffem", [&] { return ffem_forward(fused, anchors, p).fused.cwiseProduct(g).sum(); }, c);
    }
    {
        EnhancerParams p = EnhancerParams::random(h, 2, rng);
        Matrix traj = gauss(rng, 10, h), anchors = gauss(rng, o.traj_anchors, 20);
        const Matrix g = gauss(rng, 10, h);
        TfemCache cache;
        tfem_forward(traj, anchors, p, &cache);
        const ProjectedGrads pg = tfem_backward(cache, p, g);
        Case c;
        c.add_all("", EnhancerParams::tensor_names(), p, pg.d);
        c.add("traj", &traj, pg.d_input);
        c.add("anchors", &anchors, pg.d_anchors);
        run.run("tfem", [&] { return tfem_forward(traj, anchors, p).cwiseProduct(g).sum(); }, c);
    }
    {
        DecoderParams p = DecoderParams::random(h, rng);
        p.temperature = 0.7;
        Matrix anchors = gauss(rng, o.traj_anchors, 20, 2.0), f = gauss(rng, 10, h);
        const Matrix gt = gauss(rng, o.traj_anchors, 20), gl = gauss(rng, o.traj_anchors, 1);
        DecodeCache cache;
        decode(anchors, f, p, &cache);
        const DecoderGrads dg = decode_backward(cache, p, gt, gl.col(0));
        Case c;
        c.add_all("", DecoderParams::tensor_names(), p, dg.d);
        c.add("f_traj", &f, dg.d_f_traj);
        c.add("anchors", &anchors, dg.d_anchors);
        run.run("decoder",
                [&] {
                    const DecodeOutput out = decode(anchors, f, p);
                    return out.trajs.cwiseProduct(gt).sum() + out.logits.dot(gl.col(0));
                },
                c);
    }
    {
        const int k = o.traj_anchors;
        Matrix trajs = gauss(rng, k, 20, 2.0), logits = gauss(rng, k, 1);
        const Vector y = gauss(rng, 20, 1, 2.0).col(0);
        const double tau = 0.8;
        auto output = [&] {
            DecodeOutput out;
            out.trajs = trajs;
            out.offsets = Matrix::Zero(k, 20);
            out.logits = logits.col(0);
            out.temperature = 1.0;
            const Vector e = (out.logits.array() - out.logits.maxCoeff()).exp();
            out.probs = e / e.sum();
            return out;
        };
        const TrajLossGrads tg = traj_loss_backward(output(), y, tau);
        Case c;
        c.add("trajs", &trajs, tg.d_trajs);
        c.add("logits", &logits, Matrix(tg.d_logits));
        run.run("traj_loss", [&] { return traj_loss(output(), y, tau).l_traj; }, c);
    }
    {
        SpeedHead head = SpeedHead::random(h, 3, rng);
        Matrix f = gauss(rng, 1, h);
        const int cls = static_cast<int>(o.seed % 3);
        const SpeedGrads sg = speed_loss_backward(f, head, cls);
        Case c;
        c.add("w", &head.w, sg.d.w);
        c.add("b", &head.b, sg.d.b);
        c.add("f_speed", &f, sg.d_f_speed);
        run.run("speed_loss", [&] { return speed_loss(f, head, cls); }, c);
    }
    {
        DrivingModel m = DrivingModel::random(h, 3, o.feature_dim, true, rng);
        m.decoder.temperature = 0.9;
        const KnowledgeAnchors anchors{gauss(rng, o.feature_anchors, o.feature_dim, 3.0),
                                       gauss(rng, o.traj_anchors, 20, 2.0)};
        Example ex;
        ex.fused = gauss(rng, 11, h);
        ex.target = gauss(rng, 20, 1, 2.0).col(0);
        ex.speed_class = static_cast<int>(o.seed % 3);
        DrivingModel grad;
        model_gradient(m, anchors, ex, grad);
        Case c;
        const auto names = m.tensor_names();
        const auto ts = m.tensors();
        const auto gs = std::as_const(grad).tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) c.add(names[i], ts[i], *gs[i]);
        run.run("model", [&] { return model_forward(m, anchors, ex).loss.total; }, c);
    }
    return run.rows;
}

bool all_passed(const std::vector<GradSuiteRow>& rows) {
    for (const auto& r : rows)
        if (!r.passed) return false;
    return !rows.empty();
}

}  // namespace kspace
