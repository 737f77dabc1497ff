#pragma once

#include <string>
#include <vector>

#include "kspace/decoder.hpp"
#include "kspace/knowledge_space.hpp"
#include "kspace/metrics.hpp"
#include "kspace/run_config.hpp"
#include "kspace/scenario.hpp"

// End-to-end plumbing: synthetic tasks -> knowledge spaces -> decoder ->
// success matrix -> lifelong metrics.

namespace kspace {

std::vector<Example> make_examples(const TaskData& data, int h);

/// Contiguous, nearly equal row blocks.
std::vector<RowMatrix> split_rows(const RowMatrix& x, int parts);

struct CurriculumData {
    std::vector<TaskSpec> specs;
    std::vector<TaskData> train;
    std::vector<TaskData> heldout;
};

CurriculumData make_curriculum_data(const RunConfig& c);

struct SpacePair {
    KnowledgeSpace feature;
    KnowledgeSpace trajectory;
};

SpacePair make_spaces(const RunConfig& c);

struct TaskFitRow {
    int task = 0;
    std::string name;
    int samples = 0;
    int k_feature = 0;
    int k_trajectory = 0;
    FitReport feature;
    FitReport trajectory;
};

/// Folds one task's features and trajectories into the two spaces.
TaskFitRow fit_task(SpacePair& spaces, const TaskData& data, const RunConfig& c);

struct CurriculumFit {
    std::vector<SpacePair> snapshots;  // one per task boundary
    std::vector<TaskFitRow> rows;
};

CurriculumFit fit_curriculum(const CurriculumData& data, const RunConfig& c);

std::string k_growth_csv(const std::vector<TaskFitRow>& rows);

/// For every snapshot after the first: each anchor's distance from where it
/// stood at the end of the task that created it.
std::string anchor_drift_csv(const std::vector<SpacePair>& snapshots);

/// One row per anchor: created_task, weight, coordinates.
std::string anchors_csv(const AnchorSet& a);

/// Decoder task: the first `decoder.archetypes` archetypes, train and held-out.
std::pair<TaskData, TaskData> make_decoder_task(const RunConfig& c);

DrivingModel initial_model(const RunConfig& c, bool feature_enhancer);

KnowledgeAnchors anchors_from(const KnowledgeSpace& trajectory, const KnowledgeSpace* feature);

struct DecoderRun {
    TrainResult train;
    EvalReport heldout;
    KnowledgeAnchors anchors;
};

DecoderRun run_decoder_experiment(const RunConfig& c, const KnowledgeSpace& trajectory,
                                  const KnowledgeSpace* feature);

std::string eval_report_text(const EvalReport& r, int anchors);

struct PlotRow {
    int after_task = 0;
    std::string name;
    double success_all = 0.0;   // mean SR over all tasks
    double success_seen = 0.0;  // mean SR over tasks trained so far
    double mean_ade = 0.0;
    double selection_accuracy = 0.0;
    int k_feature = 0;
    int k_trajectory = 0;
};

struct LifelongResult {
    SRMatrix sr;
    RowMatrix ade;
    MetricsReport metrics;
    std::vector<PlotRow> plot;
    std::vector<TaskFitRow> fit;
};

/// Sequential training over the curriculum; after each task the model is
/// scored on every task's held-out data. Success = the selected anchor is the
/// one nearest the target and ADE < decoder.success_ade.
LifelongResult run_lifelong(const RunConfig& c);

std::string matrix_csv(const SRMatrix& m, int decimals = 2);
std::string plot_csv(const std::vector<PlotRow>& rows);
std::string lifelong_text(const LifelongResult& r);

}  // namespace kspace
