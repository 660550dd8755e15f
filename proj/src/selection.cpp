#include "flora/selection.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "flora/errors.hpp"

namespace flora {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

std::size_t common_side(std::span<const Example> examples) {
    const Image& first = examples.front().image;
    if (first.width != first.height) {
        throw ShapeError("training images must be square");
    }
    for (const Example& ex : examples) {
        if (ex.image.width != first.width || ex.image.height != first.height) {
            throw ShapeError("training images must share one size");
        }
    }
    return first.width;
}

std::string format_number(double v) {
    std::ostringstream out;
    out << v;
    return out.str();
}

}  // namespace

std::vector<Example> load_examples(const LabeledDataset& ds, std::size_t side) {
    std::vector<Example> out;
    out.reserve(ds.size());
    for (const LabeledItem& item : ds.items) {
        out.push_back({prepare(read_image(ds.path_of(item)), side), item.label});
    }
    return out;
}

void TrainConfig::validate() const {
    if (epochs == 0) {
        throw DataError("epochs must be >= 1");
    }
    if (batch_size == 0) {
        throw DataError("batch size must be >= 1");
    }
    if (stem_channels == 0) {
        throw DataError("stem channel count must be >= 1");
    }
    optimizer.validate();
}

std::string TrainConfig::label() const {
    std::ostringstream out;
    out << "dense=" << (extra_dense == 0 ? std::string("none") : std::to_string(extra_dense)) << ' '
        << to_string(optimizer.kind) << " lr=" << optimizer.learning_rate;
    return out.str();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"extra_dense", c.extra_dense},
                       {"optimizer", to_string(c.optimizer.kind)},
                       {"learning_rate", c.optimizer.learning_rate},
                       {"beta1", c.optimizer.beta1},
                       {"beta2", c.optimizer.beta2},
                       {"epsilon", c.optimizer.epsilon},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed},
                       {"augment", c.augment},
                       {"stem_channels", c.stem_channels},
                       {"blocks", c.blocks}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig defaults;
    c.extra_dense = j.value("extra_dense", defaults.extra_dense);
    c.optimizer.kind = optimizer_kind_from_string(j.value("optimizer", to_string(defaults.optimizer.kind)));
    c.optimizer.learning_rate = j.value("learning_rate", defaults.optimizer.learning_rate);
    c.optimizer.beta1 = j.value("beta1", defaults.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", defaults.optimizer.beta2);
    c.optimizer.epsilon = j.value("epsilon", defaults.optimizer.epsilon);
    c.epochs = j.value("epochs", defaults.epochs);
    c.batch_size = j.value("batch_size", defaults.batch_size);
    c.seed = j.value("seed", defaults.seed);
    c.augment = j.value("augment", defaults.augment);
    c.stem_channels = j.value("stem_channels", defaults.stem_channels);
    c.blocks = j.value("blocks", defaults.blocks);
}

ModelSpec model_spec_for(const TrainConfig& config, std::size_t side, std::size_t num_classes) {
    MicroNetOptions options;
    options.side = side;
    options.num_classes = num_classes;
    options.stem_channels = config.stem_channels;
    options.blocks = config.blocks;
    options.extra_dense = config.extra_dense;
    return make_micro_mobilenet(options);
}

TrainResult train(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes) {
    config.validate();
    if (examples.empty()) {
        throw DataError("cannot train on an empty set");
    }
    for (const Example& ex : examples) {
        if (ex.label >= num_classes) {
            throw DataError("label " + std::to_string(ex.label) + " out of range for " + std::to_string(num_classes) +
                            " classes");
        }
    }
    const std::size_t side = common_side(examples);
    TrainResult result;
    result.spec = model_spec_for(config, side, num_classes);
    result.weights = init_weights(result.spec, config.seed);
    const std::vector<std::string> names = parameter_names(result.spec);

    std::vector<Tensor> clean;
    if (!config.augment) {
        clean.reserve(examples.size());
        for (const Example& ex : examples) {
            clean.push_back(to_tensor(ex.image));
        }
    }

    OptimizerState state;
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffler(mix_seed(config.seed, 0x5EED, 0));
    std::vector<Tensor> batch;
    std::vector<std::size_t> labels;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffler);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            batch.clear();
            labels.clear();
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t idx = order[i];
                if (config.augment) {
                    batch.push_back(to_tensor(augment(examples[idx].image, mix_seed(config.seed, epoch + 1, idx))));
                } else {
                    batch.push_back(clean[idx]);
                }
                labels.push_back(examples[idx].label);
            }
            BackwardResult step = backward(result.spec, result.weights, batch, labels);
            if (!std::isfinite(step.mean_loss)) {
                throw NumericalError("training diverged in epoch " + std::to_string(epoch + 1) +
                                     " (non-finite loss)");
            }
            optimizer_step(config.optimizer, state, result.weights, step.gradients, names);
            epoch_loss += step.mean_loss * static_cast<double>(stop - start);
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(examples.size()));
    }
    for (const Tensor& t : result.weights.tensors) {
        for (float v : t.values()) {
            if (!std::isfinite(v)) {
                throw NumericalError("training produced non-finite weights");
            }
        }
    }
    result.optimizer_steps = static_cast<std::size_t>(state.step);
    return result;
}

std::vector<Tensor> predict(const ModelSpec& spec, const ModelWeights& weights, std::span<const Example> examples) {
    check_weights(spec, weights);
    std::vector<Tensor> out;
    out.reserve(examples.size());
    for (const Example& ex : examples) {
        out.push_back(forward_one(spec, weights, to_tensor(ex.image)));
    }
    return out;
}

std::size_t class_rank(std::span<const float> probabilities, std::size_t label) {
    if (label >= probabilities.size()) {
        throw DataError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(probabilities.size()) + " classes");
    }
    const float p = probabilities[label];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < probabilities.size(); ++j) {
        if (probabilities[j] > p || (probabilities[j] == p && j < label)) {
            ++rank;
        }
    }
    return rank;
}

double topk_from_probabilities(std::span<const Tensor> probabilities, std::span<const std::size_t> labels,
                               std::size_t k) {
    if (probabilities.empty()) {
        throw DataError("accuracy of an empty set is undefined");
    }
    if (probabilities.size() != labels.size()) {
        throw ShapeError("predictions and labels differ in length");
    }
    if (k == 0) {
        throw DataError("k must be >= 1");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        if (class_rank(probabilities[i].values(), labels[i]) < k) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(probabilities.size());
}

double topk_accuracy(const ModelWeights& weights, const ModelSpec& spec, std::span<const Example> examples,
                     std::size_t k) {
    if (examples.empty()) {
        throw DataError("accuracy of an empty set is undefined");
    }
    const std::vector<Tensor> probs = predict(spec, weights, examples);
    std::vector<std::size_t> labels;
    for (const Example& ex : examples) {
        labels.push_back(ex.label);
    }
    return topk_from_probabilities(probs, labels, k);
}

double top1_accuracy(const ModelWeights& weights, const ModelSpec& spec, std::span<const Example> examples) {
    return topk_accuracy(weights, spec, examples, 1);
}

double CvResult::mean() const {
    if (fold_accuracies.empty()) {
        return 0.0;
    }
    return std::accumulate(fold_accuracies.begin(), fold_accuracies.end(), 0.0) /
           static_cast<double>(fold_accuracies.size());
}

double CvResult::stddev() const {
    if (fold_accuracies.size() < 2) {
        return 0.0;
    }
    const double m = mean();
    double ss = 0.0;
    for (double a : fold_accuracies) {
        ss += (a - m) * (a - m);
    }
    return std::sqrt(ss / static_cast<double>(fold_accuracies.size()));
}

CvResult cross_validate(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes,
                        const FoldPlan& plan, const TrainFn& trainer, const FoldObserver& observer) {
    config.validate();
    if (plan.k() < 2) {
        throw DataError("cross validation needs at least two folds");
    }
    const TrainFn& run = trainer ? trainer : TrainFn(train);
    CvResult result;
    for (std::size_t fold = 0; fold < plan.k(); ++fold) {
        const std::vector<std::size_t> train_idx = plan.training_indices(fold);
        const std::vector<std::size_t>& eval_idx = plan.folds[fold];
        for (std::size_t i : eval_idx) {
            if (i >= examples.size()) {
                throw DataError("fold plan refers to item " + std::to_string(i) + " of " +
                                std::to_string(examples.size()));
            }
        }
        if (observer) {
            observer(fold, train_idx, eval_idx);
        }
        std::vector<Example> train_set, eval_set;
        train_set.reserve(train_idx.size());
        for (std::size_t i : train_idx) {
            train_set.push_back(examples[i]);
        }
        for (std::size_t i : eval_idx) {
            eval_set.push_back(examples[i]);
        }
        TrainConfig fold_config = config;
        fold_config.seed = config.seed + fold;

        const auto start = std::chrono::steady_clock::now();
        double accuracy = 0.0;
        bool diverged = false;
        std::vector<double> curve;
        try {
            TrainResult trained = run(fold_config, train_set, num_classes);
            accuracy = top1_accuracy(trained.weights, trained.spec, eval_set);
            curve = std::move(trained.loss_curve);
        } catch (const NumericalError&) {
            diverged = true;
        }
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        result.fold_accuracies.push_back(accuracy);
        result.fold_seconds.push_back(elapsed.count());
        result.diverged.push_back(diverged);
        result.loss_curves.push_back(std::move(curve));
    }
    return result;
}

void to_json(nlohmann::json& j, const SweepStages& s) {
    std::vector<std::string> optimizers;
    for (OptimizerKind kind : s.optimizers) {
        optimizers.push_back(to_string(kind));
    }
    j = nlohmann::json{{"base", s.base},
                       {"dense", s.dense_variants},
                       {"optimizers", optimizers},
                       {"learning_rates", s.learning_rates},
                       {"folds", s.folds},
                       {"cartesian", s.cartesian},
                       {"final_epochs", s.final_epochs}};
}

void from_json(const nlohmann::json& j, SweepStages& s) {
    s = SweepStages{};
    if (j.contains("base")) {
        s.base = j.at("base").get<TrainConfig>();
    }
    if (j.contains("dense")) {
        s.dense_variants = j.at("dense").get<std::vector<std::size_t>>();
    }
    if (j.contains("optimizers")) {
        s.optimizers.clear();
        for (const auto& name : j.at("optimizers")) {
            s.optimizers.push_back(optimizer_kind_from_string(name.get<std::string>()));
        }
    }
    if (j.contains("learning_rates")) {
        s.learning_rates = j.at("learning_rates").get<std::vector<double>>();
    }
    s.folds = j.value("folds", s.folds);
    s.cartesian = j.value("cartesian", s.cartesian);
    s.final_epochs = j.value("final_epochs", s.final_epochs);
}

std::size_t select_winner(std::span<const double> means) {
    if (means.empty()) {
        throw DataError("cannot select a winner from zero candidates");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < means.size(); ++i) {
        if (means[i] > means[best]) {
            best = i;
        }
    }
    return best;
}

namespace {

StageReport run_stage(const std::string& name, const std::vector<TrainConfig>& candidates,
                      std::span<const Example> examples, std::size_t num_classes, const FoldPlan& plan,
                      const TrainFn& trainer) {
    if (candidates.empty()) {
        throw DataError("sweep stage '" + name + "' has no candidates");
    }
    StageReport stage;
    stage.name = name;
    std::vector<double> means;
    for (const TrainConfig& config : candidates) {
        CandidateResult candidate{config, cross_validate(config, examples, num_classes, plan, trainer)};
        means.push_back(candidate.cv.mean());
        stage.candidates.push_back(std::move(candidate));
    }
    stage.winner = select_winner(means);
    return stage;
}

}  // namespace

SweepReport run_sweep(std::span<const Example> examples, std::size_t num_classes, const SweepStages& stages,
                      const TrainFn& trainer) {
    stages.base.validate();
    if (examples.empty()) {
        throw DataError("cannot run a sweep on an empty dataset");
    }
    if (stages.dense_variants.empty() || stages.optimizers.empty() || stages.learning_rates.empty()) {
        throw DataError("every sweep stage needs at least one candidate");
    }
    const FoldPlan plan = kfold_plan(examples.size(), stages.folds, stages.base.seed);
    SweepReport report;

    if (stages.cartesian) {
        std::vector<TrainConfig> grid;
        for (std::size_t dense : stages.dense_variants) {
            for (OptimizerKind kind : stages.optimizers) {
                for (double lr : stages.learning_rates) {
                    TrainConfig c = stages.base;
                    c.extra_dense = dense;
                    c.optimizer.kind = kind;
                    c.optimizer.learning_rate = lr;
                    grid.push_back(c);
                }
            }
        }
        report.stages.push_back(run_stage("cartesian", grid, examples, num_classes, plan, trainer));
        report.winner = report.stages.back().candidates[report.stages.back().winner].config;
        return report;
    }

    TrainConfig current = stages.base;
    auto freeze = [&](StageReport stage) {
        current = stage.candidates[stage.winner].config;
        report.stages.push_back(std::move(stage));
    };

    std::vector<TrainConfig> dense_stage;
    for (std::size_t dense : stages.dense_variants) {
        TrainConfig c = current;
        c.extra_dense = dense;
        dense_stage.push_back(c);
    }
    freeze(run_stage("dense", dense_stage, examples, num_classes, plan, trainer));

    std::vector<TrainConfig> optimizer_stage;
    for (OptimizerKind kind : stages.optimizers) {
        TrainConfig c = current;
        c.optimizer.kind = kind;
        optimizer_stage.push_back(c);
    }
    freeze(run_stage("optimizer", optimizer_stage, examples, num_classes, plan, trainer));

    std::vector<TrainConfig> lr_stage;
    for (double lr : stages.learning_rates) {
        TrainConfig c = current;
        c.optimizer.learning_rate = lr;
        lr_stage.push_back(c);
    }
    freeze(run_stage("learning_rate", lr_stage, examples, num_classes, plan, trainer));

    report.winner = current;
    return report;
}

TrainResult final_train(const TrainConfig& config, std::span<const Example> examples, std::size_t num_classes,
                        std::size_t epochs) {
    TrainConfig full = config;
    full.epochs = epochs;
    return train(full, examples, num_classes);
}

nlohmann::json to_json(const SweepReport& report) {
    nlohmann::json stages = nlohmann::json::array();
    for (const StageReport& stage : report.stages) {
        nlohmann::json candidates = nlohmann::json::array();
        for (const CandidateResult& c : stage.candidates) {
            std::vector<bool> diverged(c.cv.diverged.begin(), c.cv.diverged.end());
            candidates.push_back({{"label", c.config.label()},
                                  {"config", c.config},
                                  {"fold_accuracies", c.cv.fold_accuracies},
                                  {"mean", c.cv.mean()},
                                  {"std", c.cv.stddev()},
                                  {"fold_seconds", c.cv.fold_seconds},
                                  {"diverged", diverged}});
        }
        stages.push_back({{"name", stage.name}, {"winner", stage.winner}, {"candidates", candidates}});
    }
    return nlohmann::json{{"version", 1}, {"stages", stages}, {"winner", report.winner}};
}

void write_loss_curves(const SweepReport& report, std::ostream& out) {
    out << "stage,candidate,fold,epoch,loss\n";
    for (const StageReport& stage : report.stages) {
        for (const CandidateResult& c : stage.candidates) {
            for (std::size_t fold = 0; fold < c.cv.loss_curves.size(); ++fold) {
                const auto& curve = c.cv.loss_curves[fold];
                for (std::size_t e = 0; e < curve.size(); ++e) {
                    out << stage.name << ",\"" << c.config.label() << "\"," << fold << ',' << (e + 1) << ','
                        << format_number(curve[e]) << '\n';
                }
            }
        }
    }
}

}  // namespace flora
