// flora: command-line front end for the species classification pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <algorithm>
#include <cctype>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flora/dataset.hpp"
#include "flora/ensemble.hpp"
#include "flora/errors.hpp"
#include "flora/image.hpp"
#include "flora/modelstore.hpp"
#include "flora/selection.hpp"
#include "flora/service.hpp"
#include "flora/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw flora::DataError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw flora::DataError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw flora::DataError("cannot write " + path.string());
    }
    out << text;
}

flora::LabeledDataset load_dataset(const fs::path& path) {
    flora::LoadReport report = flora::load_labels(path);
    if (!report.missing.empty()) {
        throw flora::DataError(std::to_string(report.missing.size()) + " listed images are missing, first: " +
                               report.missing.front());
    }
    return std::move(report.dataset);
}

// Side 0 means "use the shorter edge of the first image".
std::size_t resolve_side(const flora::LabeledDataset& ds, std::size_t side) {
    if (side != 0) {
        return side;
    }
    if (ds.items.empty()) {
        throw flora::DataError("dataset is empty");
    }
    const flora::Image first = flora::read_image(ds.path_of(ds.items.front()));
    return std::min(first.width, first.height);
}

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// --- prep -------------------------------------------------------------------

struct PrepArgs {
    fs::path in;
    fs::path out;
    std::size_t side = flora::kDefaultSide;
    std::size_t augment = 0;
    std::uint64_t seed = 0;
};

void run_prep(const PrepArgs& a) {
    fs::create_directories(a.out);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(a.in)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw flora::DataError("no PNG or JPEG images in " + a.in.string());
    }

    // Carry labels through when the input directory has them.
    std::map<std::string, std::string> labels;
    std::vector<std::string> class_names;
    if (fs::exists(a.in / "labels.csv")) {
        const flora::LabeledDataset ds = load_dataset(a.in / "labels.csv");
        class_names = ds.class_names;
        for (const auto& item : ds.items) {
            labels[item.image] = ds.class_names[item.label];
        }
    }
    flora::LabeledDataset out_ds;
    out_ds.class_names = class_names;
    auto add_label = [&](const std::string& src, const std::string& dst) {
        const auto it = labels.find(src);
        if (it == labels.end()) {
            return;
        }
        const auto pos = std::find(class_names.begin(), class_names.end(), it->second);
        out_ds.items.push_back({dst, static_cast<std::size_t>(pos - class_names.begin())});
    };

    std::size_t written = 0;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const std::string name = files[i].filename().string();
        const std::string stem = files[i].stem().string();
        const flora::Image prepared = flora::prepare(flora::read_image(files[i]), a.side);
        flora::write_png(a.out / (stem + ".png"), prepared);
        add_label(name, stem + ".png");
        ++written;
        for (std::size_t j = 0; j < a.augment; ++j) {
            const std::uint64_t seed = a.seed * 1000003ULL + i * 1009ULL + j;
            std::ostringstream aug_name;
            aug_name << stem << "_aug" << j << ".png";
            flora::write_png(a.out / aug_name.str(), flora::augment(prepared, seed));
            add_label(name, aug_name.str());
            ++written;
        }
    }
    if (!labels.empty()) {
        flora::save_labels(out_ds, a.out / "labels.csv");
    }
    std::cout << "wrote " << written << " images to " << a.out.string() << "\n";
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 3;
    std::size_t per_class = 100;
    std::size_t side = 16;
    std::uint64_t seed = 7;
    double test_fraction = 0.1;
    fs::path out = "synth";
};

void run_synth(const SynthArgs& a) {
    const flora::LabeledDataset ds = flora::synth_dataset(a.classes, a.per_class, a.side, a.seed, a.out);
    const flora::TrainTestSplit split = flora::split_train_test(ds, a.test_fraction, a.seed);
    flora::save_labels(split.train, a.out / "train.csv");
    flora::save_labels(split.test, a.out / "test.csv");
    std::cout << "wrote " << ds.items.size() << " images (" << split.train.items.size() << " train, "
              << split.test.items.size() << " test) to " << a.out.string() << "\n";
}

// --- audit ------------------------------------------------------------------

struct AuditArgs {
    fs::path dataset;
    std::size_t minimum = flora::kMinImagesPerClass;
    bool strict = false;
    bool json_out = false;
};

void run_audit(const AuditArgs& a) {
    const flora::LabeledDataset ds = load_dataset(a.dataset);
    const std::vector<std::size_t> counts = flora::class_counts(ds);
    const flora::AuditReport report = flora::audit_min_count(ds, a.minimum, false);
    if (a.json_out) {
        json classes = json::object();
        for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
            classes[ds.class_names[c]] = counts[c];
        }
        json below = json::object();
        for (const auto& [name, count] : report.below) {
            below[name] = count;
        }
        std::cout << json{{"minimum", a.minimum}, {"classes", classes}, {"below", below}}.dump(2) << "\n";
    } else {
        for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
            std::cout << std::setw(6) << counts[c] << "  " << ds.class_names[c] << "\n";
        }
        std::cout << report.below.size() << " of " << ds.class_names.size() << " classes below " << a.minimum
                  << " images\n";
    }
    if (a.strict) {
        flora::audit_min_count(ds, a.minimum, true);
    }
}

// --- sweep / train ----------------------------------------------------------

struct SweepArgs {
    fs::path dataset;
    fs::path stages;
    fs::path out = "report.json";
    fs::path curves;
    fs::path model;
    std::size_t side = 0;
};

void run_sweep(const SweepArgs& a) {
    const flora::LabeledDataset ds = load_dataset(a.dataset);
    const std::size_t side = resolve_side(ds, a.side);
    const std::vector<flora::Example> examples = flora::load_examples(ds, side);
    flora::SweepStages stages;
    if (!a.stages.empty()) {
        stages = read_json(a.stages).get<flora::SweepStages>();
    }
    const flora::SweepReport report = flora::run_sweep(examples, ds.class_names.size(), stages);
    json doc = flora::to_json(report);
    doc["side"] = side;
    doc["classes"] = ds.class_names;
    write_text(a.out, doc.dump(2) + "\n");
    if (!a.curves.empty()) {
        std::ostringstream csv;
        flora::write_loss_curves(report, csv);
        write_text(a.curves, csv.str());
    }
    for (const auto& stage : report.stages) {
        const auto& best = stage.candidates[stage.winner];
        std::cout << stage.name << ": " << best.config.label() << "  mean " << std::fixed << std::setprecision(4)
                  << best.cv.mean() << "\n";
    }
    std::cout << "winner: " << report.winner.label() << "\n";
    if (!a.model.empty()) {
        const flora::TrainResult result =
            flora::final_train(report.winner, examples, ds.class_names.size(), stages.final_epochs);
        flora::save(result.spec, result.weights, ds.class_names, a.model);
        std::cout << "final model (" << stages.final_epochs << " epochs) saved to " << a.model.string() << "\n";
    }
}

struct TrainArgs {
    fs::path dataset;
    fs::path config;
    fs::path out = "model.fmdl";
    fs::path curve;
    std::size_t side = 0;
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a) {
    const flora::LabeledDataset ds = load_dataset(a.dataset);
    const std::size_t side = resolve_side(ds, a.side);
    flora::TrainConfig config;
    if (!a.config.empty()) {
        json j = read_json(a.config);
        // A sweep report carries its winner under "winner".
        config = (j.contains("winner") ? j.at("winner") : j).get<flora::TrainConfig>();
    }
    if (a.epochs) {
        config.epochs = *a.epochs;
    }
    if (a.seed) {
        config.seed = *a.seed;
    }
    const std::vector<flora::Example> examples = flora::load_examples(ds, side);
    const flora::TrainResult result = flora::train(config, examples, ds.class_names.size());
    flora::save(result.spec, result.weights, ds.class_names, a.out);
    if (!a.curve.empty()) {
        std::ostringstream csv;
        csv << "epoch,loss\n";
        for (std::size_t e = 0; e < result.loss_curve.size(); ++e) {
            csv << e + 1 << ',' << result.loss_curve[e] << "\n";
        }
        write_text(a.curve, csv.str());
    }
    std::cout << config.label() << ": final loss " << result.loss_curve.back() << ", saved to " << a.out.string()
              << "\n";
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
    fs::path model;
    fs::path dataset;
    std::size_t k = 0;
    bool json_out = false;
};

void run_eval(const EvalArgs& a) {
    const flora::EnsembleModel ensemble = flora::to_ensemble(flora::load_bundle(a.model));
    const flora::LabeledDataset ds = load_dataset(a.dataset);
    const auto& model_classes = ensemble.class_names();
    std::vector<std::size_t> remap(ds.class_names.size());
    for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
        const auto it = std::find(model_classes.begin(), model_classes.end(), ds.class_names[c]);
        if (it == model_classes.end()) {
            throw flora::DataError("dataset class '" + ds.class_names[c] + "' is not one of the model's classes");
        }
        remap[c] = static_cast<std::size_t>(it - model_classes.begin());
    }
    if (ds.items.empty()) {
        throw flora::DataError("dataset is empty");
    }
    const flora::Shape& shape = ensemble.input_shape();
    if (shape.size() != 3 || shape[0] != shape[1]) {
        throw flora::DataError("model input " + flora::shape_string(shape) + " is not a square image");
    }
    const std::vector<flora::Example> examples = flora::load_examples(ds, shape[0]);
    std::vector<flora::Tensor> probs;
    std::vector<std::size_t> labels;
    for (const auto& ex : examples) {
        probs.push_back(ensemble.predict(flora::to_tensor(ex.image)));
        labels.push_back(remap[ex.label]);
    }
    const double top1 = flora::topk_from_probabilities(probs, labels, 1);
    json doc{{"model", a.model.filename().string()},
             {"members", ensemble.size()},
             {"items", examples.size()},
             {"top1", top1}};
    std::optional<double> topk;
    if (a.k > 0) {
        topk = flora::topk_from_probabilities(probs, labels, a.k);
        doc["k"] = a.k;
        doc["topk"] = *topk;
    }
    if (a.json_out) {
        std::cout << doc.dump(2) << "\n";
    } else {
        std::cout << "items: " << examples.size() << "\n"
                  << "top-1 accuracy: " << std::fixed << std::setprecision(4) << top1 << "\n";
        if (topk) {
            std::cout << "top-" << a.k << " accuracy: " << *topk << "\n";
        }
    }
}

// --- ensemble / quantize ----------------------------------------------------

struct EnsembleArgs {
    std::vector<fs::path> members;
    fs::path out = "ensemble.fmdl";
};

void run_ensemble(const EnsembleArgs& a) {
    std::vector<std::pair<std::vector<std::string>, flora::MemberModel>> members;
    for (const auto& path : a.members) {
        flora::ModelBundle bundle = flora::load_bundle(path);
        for (auto& m : bundle.members) {
            members.emplace_back(bundle.class_names, std::move(m));
        }
    }
    const flora::EnsembleModel ensemble = flora::EnsembleModel::from_members(members);
    const flora::ModelBundle out{ensemble.class_names(), ensemble.members()};
    flora::save_bundle(out, a.out);
    std::cout << ensemble.size() << " members, payload " << flora::payload_bytes(out) << " bytes, file "
              << flora::model_size_bytes(a.out) << " bytes -> " << a.out.string() << "\n";
}

struct QuantizeArgs {
    fs::path model;
    fs::path out;
    std::string precision = "f16";
    bool json_out = false;
};

void run_quantize(const QuantizeArgs& a) {
    flora::ModelBundle bundle = flora::load_bundle(a.model);
    const flora::Precision precision = flora::precision_from_string(a.precision);
    const std::uint64_t before = flora::payload_bytes(bundle);
    for (auto& m : bundle.members) {
        switch (precision) {
            case flora::Precision::f32: break;
            case flora::Precision::f16: m.weights = flora::quantize_f16(m.weights); break;
            case flora::Precision::i8_affine: m.weights = flora::quantize_i8(m.weights); break;
        }
    }
    flora::save_bundle(bundle, a.out);
    const std::uint64_t after = flora::payload_bytes(bundle);
    const double ratio = before == 0 ? 0.0 : static_cast<double>(after) / static_cast<double>(before);
    if (a.json_out) {
        std::cout << json{{"precision", flora::to_string(precision)},
                          {"payload_before", before},
                          {"payload_after", after},
                          {"ratio", ratio},
                          {"file_before", flora::model_size_bytes(a.model)},
                          {"file_after", flora::model_size_bytes(a.out)}}
                         .dump(2)
                  << "\n";
    } else {
        std::cout << flora::to_string(precision) << ": payload " << before << " -> " << after << " bytes (ratio "
                  << std::fixed << std::setprecision(3) << ratio << "), file " << flora::model_size_bytes(a.out)
                  << " bytes\n";
    }
}

// --- serve ------------------------------------------------------------------

flora::HttpService* g_service = nullptr;

void handle_signal(int) {
    if (g_service != nullptr) {
        g_service->stop();
    }
}

struct ServeArgs {
    std::optional<fs::path> model;
    std::optional<fs::path> species;
    std::optional<std::string> host;
    std::optional<int> port;
    std::optional<fs::path> feedback_log;
    std::optional<fs::path> static_dir;
    std::optional<fs::path> thumbnail_dir;
};

void run_serve(const ServeArgs& a) {
    flora::ServiceConfig config = flora::config_from_env();
    if (a.model) config.model = *a.model;
    if (a.species) config.species = *a.species;
    if (a.host) config.host = *a.host;
    if (a.port) config.port = *a.port;
    if (a.feedback_log) config.feedback_log = *a.feedback_log;
    if (a.static_dir) config.static_dir = *a.static_dir;
    if (a.thumbnail_dir) config.thumbnail_dir = *a.thumbnail_dir;

    const auto classifier = flora::make_classifier(config);
    flora::HttpService service(*classifier, config.static_dir);
    const int port = service.bind(config.host, config.port);
    g_service = &service;
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    std::cout << "listening on " << config.host << ":" << port
              << (classifier->model_loaded() ? "" : " (no model loaded, classify answers 503)") << std::endl;
    service.run();
    g_service = nullptr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Species classification toolkit"};
    app.require_subcommand(1);

    PrepArgs prep;
    auto* prep_cmd = app.add_subcommand("prep", "Center-crop and resize a directory of images, optionally augmenting");
    prep_cmd->add_option("--in", prep.in, "Input directory")->required()->check(CLI::ExistingDirectory);
    prep_cmd->add_option("--out", prep.out, "Output directory")->required();
    prep_cmd->add_option("--side", prep.side, "Output side in pixels")->check(CLI::PositiveNumber);
    prep_cmd->add_option("--augment", prep.augment, "Augmented copies per image");
    prep_cmd->add_option("--seed", prep.seed, "Augmentation seed");

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic shape dataset with a train/test split");
    synth_cmd->add_option("--classes", synth.classes, "Number of classes")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--per-class", synth.per_class, "Images per class")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--side", synth.side, "Image side in pixels")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", synth.seed, "Generator and split seed");
    synth_cmd->add_option("--test-fraction", synth.test_fraction, "Held-out fraction")->check(CLI::Range(0.0, 1.0));
    synth_cmd->add_option("--out", synth.out, "Output directory");

    AuditArgs audit;
    auto* audit_cmd = app.add_subcommand("audit", "Report classes with fewer than --min images");
    audit_cmd->add_option("--dataset", audit.dataset, "labels.csv or its directory")->required();
    audit_cmd->add_option("--min", audit.minimum, "Minimum images per class");
    audit_cmd->add_flag("--strict", audit.strict, "Exit with a data error when any class is below the minimum");
    audit_cmd->add_flag("--json", audit.json_out, "Machine-readable output");

    SweepArgs sweep;
    auto* sweep_cmd = app.add_subcommand("sweep", "Staged k-fold model selection");
    sweep_cmd->add_option("--dataset", sweep.dataset, "Training labels CSV or directory")->required();
    sweep_cmd->add_option("--stages", sweep.stages, "Stage definition JSON (defaults built in)");
    sweep_cmd->add_option("--out", sweep.out, "Report JSON path");
    sweep_cmd->add_option("--curves", sweep.curves, "Loss-curve CSV path");
    sweep_cmd->add_option("--model", sweep.model, "Train the winner on all data and save it here");
    sweep_cmd->add_option("--side", sweep.side, "Model input side (0: first image's shorter edge)");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train one configuration on a whole dataset");
    train_cmd->add_option("--dataset", train.dataset, "Labels CSV or directory")->required();
    train_cmd->add_option("--config", train.config, "TrainConfig JSON or a sweep report");
    train_cmd->add_option("--out", train.out, "Model output path");
    train_cmd->add_option("--curve", train.curve, "Loss-curve CSV path");
    train_cmd->add_option("--side", train.side, "Model input side (0: first image's shorter edge)");
    train_cmd->add_option("--epochs", train.epochs, "Override epochs");
    train_cmd->add_option("--seed", train.seed, "Override seed");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Top-1 (and Top-k) accuracy of a model or ensemble");
    eval_cmd->add_option("--model", eval.model, "Model file")->required();
    eval_cmd->add_option("--dataset", eval.dataset, "Labels CSV or directory")->required();
    eval_cmd->add_option("--k", eval.k, "Also report Top-k");
    eval_cmd->add_flag("--json", eval.json_out, "Machine-readable output");

    EnsembleArgs ens;
    auto* ens_cmd = app.add_subcommand("ensemble", "Combine model files into one probability-averaging ensemble");
    ens_cmd->add_option("--members", ens.members, "Member model files")->required()->expected(1, -1);
    ens_cmd->add_option("--out", ens.out, "Ensemble output path");

    QuantizeArgs quant;
    auto* quant_cmd = app.add_subcommand("quantize", "Post-training weight quantization");
    quant_cmd->add_option("--model", quant.model, "Input model")->required();
    quant_cmd->add_option("--out", quant.out, "Output model")->required();
    quant_cmd->add_option("--precision", quant.precision, "f16 (default) or i8")
        ->check(CLI::IsMember({"f32", "f16", "i8", "i8-affine"}));
    quant_cmd->add_flag("--json", quant.json_out, "Machine-readable output");

    ServeArgs serve;
    auto* serve_cmd = app.add_subcommand("serve", "HTTP classification service");
    serve_cmd->add_option("--model", serve.model, "Model or ensemble file [FLORA_MODEL]");
    serve_cmd->add_option("--species", serve.species, "Species store JSON [FLORA_SPECIES]");
    serve_cmd->add_option("--host", serve.host, "Bind address [FLORA_HOST]");
    serve_cmd->add_option("--port", serve.port, "Port, 0 for any free one [FLORA_PORT]");
    serve_cmd->add_option("--feedback-log", serve.feedback_log, "Feedback JSON-lines file [FLORA_FEEDBACK_LOG]");
    serve_cmd->add_option("--static", serve.static_dir, "Web bundle directory [FLORA_STATIC_DIR]");
    serve_cmd->add_option("--thumbnails", serve.thumbnail_dir, "Thumbnail directory [FLORA_THUMBNAIL_DIR]");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*prep_cmd) run_prep(prep);
        if (*synth_cmd) run_synth(synth);
        if (*audit_cmd) run_audit(audit);
        if (*sweep_cmd) run_sweep(sweep);
        if (*train_cmd) run_train(train);
        if (*eval_cmd) run_eval(eval);
        if (*ens_cmd) run_ensemble(ens);
        if (*quant_cmd) run_quantize(quant);
        if (*serve_cmd) run_serve(serve);
    } catch (const flora::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const flora::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitData;
    } catch (const flora::NotFoundError& e) {
        std::cerr << "not found: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        // DataError, FormatError, filesystem and JSON failures
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
