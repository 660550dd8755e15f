#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flora/dataset.hpp"
#include "flora/image.hpp"
#include "flora/model.hpp"
#include "flora/optim.hpp"

namespace flora {

/// One labelled image already cropped and resized to the model side.
struct Example {
    Image image;
    std::size_t label = 0;
};

/// Reads every item, applies center_crop_square + resize(side).
std::vector<Example> load_examples(const LabeledDataset& ds, std::size_t side);

struct TrainConfig {
    /// Extra dense layer width before the classifier: 0 (none), 256 or 512.
    std::size_t extra_dense = 0;
    OptimizerConfig optimizer{OptimizerKind::adagrad, 0.01};
    std::size_t epochs = 15;
    std::size_t batch_size = 16;
    std::uint64_t seed = 7;
    bool augment = false;
    std::size_t stem_channels = 8;
    std::size_t blocks = 2;

    void validate() const;
    /// Short human label, e.g. "dense=256 Adagrad lr=0.01".
    std::string label() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

ModelSpec model_spec_for(const TrainConfig& config, std::size_t side, std::size_t num_classes);

struct TrainResult {
    ModelSpec spec;
    ModelWeights weights;
    /// Mean training loss of every epoch.
    std::vector<double> loss_curve;
    std::size_t optimizer_steps = 0;
};

/// Mini-batch cross-entropy training; the visiting order is reshuffled every
/// epoch from the config seed. Throws DataError on an empty set and
/// NumericalError when the loss or a gradient stops being finite.
TrainResult train(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes);

std::vector<Tensor> predict(const ModelSpec& spec, const ModelWeights& weights, std::span<const Example> examples);

/// Position of `label` when classes are ordered by decreasing probability,
/// ties going to the lower index.
std::size_t class_rank(std::span<const float> probabilities, std::size_t label);

/// Fraction of items whose true class is among the k highest probabilities.
double topk_from_probabilities(std::span<const Tensor> probabilities, std::span<const std::size_t> labels,
                               std::size_t k);

double top1_accuracy(const ModelWeights& weights, const ModelSpec& spec, std::span<const Example> examples);
double topk_accuracy(const ModelWeights& weights, const ModelSpec& spec, std::span<const Example> examples,
                     std::size_t k);

using TrainFn = std::function<TrainResult(const TrainConfig&, std::span<const Example>, std::size_t)>;

/// Called once per fold with the exact item indices used for training and
/// for evaluation.
using FoldObserver =
    std::function<void(std::size_t fold, std::span<const std::size_t> train_idx, std::span<const std::size_t> eval_idx)>;

struct CvResult {
    std::vector<double> fold_accuracies;
    std::vector<double> fold_seconds;
    /// Folds whose training hit NaN/Inf; they score accuracy 0.
    std::vector<bool> diverged;
    std::vector<std::vector<double>> loss_curves;

    double mean() const;
    double stddev() const;
};

/// For each fold i: train on every other fold (seed = config.seed + i) and
/// measure Top-1 on fold i.
CvResult cross_validate(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes,
                        const FoldPlan& plan, const TrainFn& trainer = {}, const FoldObserver& observer = {});

struct SweepStages {
    TrainConfig base;
    std::vector<std::size_t> dense_variants{0, 256, 512};
    std::vector<OptimizerKind> optimizers{OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamax,
                                          OptimizerKind::adagrad};
    std::vector<double> learning_rates{0.001, 0.005, 0.01};
    std::size_t folds = 5;
    /// Evaluate the full dense x optimizer x learning-rate grid as one stage
    /// instead of freezing each stage's winner.
    bool cartesian = false;
    std::size_t final_epochs = 40;
};

void to_json(nlohmann::json& j, const SweepStages& stages);
void from_json(const nlohmann::json& j, SweepStages& stages);

struct CandidateResult {
    TrainConfig config;
    CvResult cv;
};

struct StageReport {
    std::string name;
    std::vector<CandidateResult> candidates;
    std::size_t winner = 0;
};

struct SweepReport {
    std::vector<StageReport> stages;
    TrainConfig winner;
};

/// First candidate with the highest mean; later candidates win only on a strictly greater mean.
std::size_t select_winner(std::span<const double> means);

/// Staged search: dense variant, then optimizer, then learning rate. Each
/// stage runs k-fold CV for every candidate and freezes the winner before the
/// next stage starts.
SweepReport run_sweep(std::span<const Example> examples, std::size_t num_classes, const SweepStages& stages,
                      const TrainFn& trainer = {});

/// Trains the selected configuration on the whole training set.
TrainResult final_train(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes,
                        std::size_t epochs = 40);

nlohmann::json to_json(const SweepReport& report);
/// CSV with header `stage,candidate,fold,epoch,loss`.
void write_loss_curves(const SweepReport& report, std::ostream& out);

}  // namespace flora
