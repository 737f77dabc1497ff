#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kspace/attention.hpp"

// Anchor-conditioned trajectory decoder. Each trajectory anchor becomes one
// token, attends over the trajectory features, and two heads read the result:
// per-anchor waypoint offsets and a selection logit.
//
//   tokens  = E(A)
//   att     = Attn(Q = tokens, K = V = F_traj) + tokens
//   trajs   = A + offset_head(att)
//   probs   = softmax(logit_head(att) / tau)

namespace kspace {

inline constexpr double kProbFloor = 1e-12;

struct DecoderParams {
    Projection encoder;  // 2T x h weight (rows 2t, 2t+1 act on waypoint t), 1 x h bias
    AttentionParams interaction;
    Mlp offset_head;  // h -> h -> 2T
    Mlp logit_head;   // h -> h -> 1
    double temperature = 1.0;
    int top_k = 1;

    static DecoderParams random(int h, std::mt19937_64& rng, int steps = kWaypointCount);
    int width() const { return interaction.width(); }
    int traj_dim() const { return static_cast<int>(encoder.w.rows()); }
    void validate() const;
    std::vector<Matrix*> tensors();
    std::vector<const Matrix*> tensors() const;
    static std::vector<std::string> tensor_names();

    static constexpr int kWaypointCount = 10;
};

/// Per-anchor token: mean over waypoints of (affine(x_t, y_t) + PE(t)).
/// Tokens depend only on their own anchor.
Matrix encode_anchors(const Matrix& anchors, const DecoderParams& p);

struct DecodeOutput {
    Matrix trajs;    // K x 2T
    Vector probs;    // K
    Vector logits;   // K
    Matrix offsets;  // K x 2T
    Vector selected;  // 2T
    std::vector<int> top;  // indices that formed `selected`, best first
    double temperature = 1.0;
};

struct DecodeCache {
    Matrix anchors, tokens, attended;
    AttentionCache interaction;
    MlpCache offset, logit;
};

DecodeOutput decode(const Matrix& anchors, const Matrix& f_traj, const DecoderParams& p,
                    DecodeCache* cache = nullptr);

/// Indices of the k largest probabilities, ties to the lower index.
std::vector<int> top_k_indices(const Vector& probs, int k);

struct DecoderGrads {
    DecoderParams d;
    Matrix d_f_traj;
    Matrix d_anchors;
};

DecoderGrads decode_backward(const DecodeCache& cache, const DecoderParams& p, const Matrix& d_trajs,
                             const Vector& d_logits);

struct LossBreakdown {
    double l_prob = 0.0;
    double l_best = 0.0;
    double l_weighted = 0.0;
    double l_traj = 0.0;
    double l_speed = 0.0;
    // Perception terms of the full objective; always zero here.
    double l_sem = 0.0;
    double l_det = 0.0;
    double total = 0.0;

    void finish() {
        l_traj = l_prob + l_best + l_weighted;
        total = l_sem + l_det + l_traj + l_speed;
    }
};

/// softmax(-||traj_k - y|| / tau).
Vector target_probs(const Matrix& trajs, const Vector& y, double tau);

/// Mean smooth-L1 (beta = 1) over coordinates.
double mean_smooth_l1(const Vector& residual);

LossBreakdown traj_loss(const DecodeOutput& out, const Vector& y, double tau);

struct TrajLossGrads {
    Matrix d_trajs;
    Vector d_logits;
};

/// Gradient of l_traj. Target probabilities are differentiated too.
TrajLossGrads traj_loss_backward(const DecodeOutput& out, const Vector& y, double tau);

struct SpeedHead {
    Matrix w, b;  // h x C, 1 x C

    static SpeedHead random(int h, int classes, std::mt19937_64& rng);
    int classes() const { return static_cast<int>(w.cols()); }
    std::vector<Matrix*> tensors() { return {&w, &b}; }
};

double speed_loss(const Matrix& f_speed, const SpeedHead& head, int target_class);

struct SpeedGrads {
    SpeedHead d;
    Matrix d_f_speed;
};

SpeedGrads speed_loss_backward(const Matrix& f_speed, const SpeedHead& head, int target_class);

// ---- composed model ----

/// Decoder plus speed head, optionally preceded by the two enhancers.
struct DrivingModel {
    DecoderParams decoder;
    SpeedHead speed;
    std::optional<EnhancerParams> ffem;  // feature anchors -> fused tokens
    std::optional<EnhancerParams> tfem;  // trajectory anchors -> trajectory rows

    /// feature_dim = 0 disables the feature enhancer; use_tfem likewise.
    static DrivingModel random(int h, int speed_classes, int feature_dim, bool use_tfem, std::mt19937_64& rng);
    int width() const { return decoder.width(); }
    void validate() const;
    std::vector<Matrix*> tensors();
    std::vector<const Matrix*> tensors() const;
    std::vector<std::string> tensor_names() const;
    DrivingModel zeros_like() const;
};

struct KnowledgeAnchors {
    Matrix feature;     // K_f x D, may be empty when the model has no feature enhancer
    Matrix trajectory;  // K_t x 2T
};

/// One training or evaluation sample. `fused` holds T trajectory rows followed
/// by one speed row, all of width h.
struct Example {
    Matrix fused;
    Vector target;
    int speed_class = 0;
};

/// Lifts a raw feature vector to T + 1 rows of width h: the feature is folded
/// to width h (entry j adds into column j mod h), trajectory rows add PE(t).
Matrix lift_feature(const Vector& feature, int h, int steps = DecoderParams::kWaypointCount);

struct ForwardResult {
    DecodeOutput decode;
    LossBreakdown loss;
};

ForwardResult model_forward(const DrivingModel& m, const KnowledgeAnchors& anchors, const Example& ex);

/// Loss and gradient for one example, gradient shaped like the model.
LossBreakdown model_gradient(const DrivingModel& m, const KnowledgeAnchors& anchors, const Example& ex,
                             DrivingModel& grad);

struct TrainConfig {
    int steps = 150;
    double learning_rate = 0.01;
    // adam = false gives plain gradient descent.
    bool adam = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct TraceRow {
    int step = 0;
    LossBreakdown loss;  // mean over the dataset, before the step's update
};

struct TrainResult {
    DrivingModel model;
    std::vector<TraceRow> trace;
};

/// Full-batch training. Per-example gradients run in parallel and are summed
/// in dataset order, so results do not depend on the thread count.
TrainResult train_decoder(const std::vector<Example>& data, const KnowledgeAnchors& anchors, DrivingModel model,
                          const TrainConfig& config);

/// Mean loss and mean gradient over a dataset.
LossBreakdown dataset_gradient(const DrivingModel& m, const KnowledgeAnchors& anchors,
                               const std::vector<Example>& data, DrivingModel* grad);

struct EvalReport {
    double accuracy = 0.0;  // selected anchor is the one nearest the target
    double ade = 0.0;       // mean waypoint displacement of the selected trajectory
    std::vector<char> correct;
    std::vector<double> displacement;
};

/// Average Euclidean distance between matching waypoints.
double displacement_error(const Vector& a, const Vector& b);

EvalReport evaluate(const DrivingModel& m, const KnowledgeAnchors& anchors, const std::vector<Example>& data);

std::string trace_csv(const std::vector<TraceRow>& trace);

}  // namespace kspace
