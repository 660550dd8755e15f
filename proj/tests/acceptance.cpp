// Prints one PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "httplib.h"
#include "flora/errors.hpp"
#include "flora/layers.hpp"
#include "flora/modelstore.hpp"
#include "flora/selection.hpp"
#include "flora/service.hpp"
#include "flora/synth.hpp"
#include "micro_models.hpp"
#include "test_util.hpp"

using namespace flora;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-3;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kLayerTolerance = 1e-5;
constexpr double kMinTestTop1 = 0.90;
constexpr double kEndToEndBudgetSeconds = 600.0;
constexpr double kF16RatioTarget = 0.5, kI8RatioTarget = 0.25, kRatioTolerance = 0.02;
constexpr double kMaxF16Drop = 0.01, kMaxI8Drop = 0.03;
constexpr int kResizeTolerance = 1;

// End-to-end recipe: 3 classes x 100 images at 16 px, seed 7, 90/10 split.
constexpr std::size_t kClasses = 3, kPerClass = 100, kSide = 16;
constexpr std::uint64_t kDataSeed = 7;
constexpr double kTestFraction = 0.1;

SweepStages acceptance_stages() {
    SweepStages s;
    s.base.stem_channels = 16;
    s.base.blocks = 3;
    s.base.epochs = 60;
    s.base.augment = true;
    s.final_epochs = 150;
    return s;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const Outcome& o) {
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
}

void run(const std::string& name, const std::function<Outcome()>& check) {
    try {
        report(name, check());
    } catch (const std::exception& e) {
        report(name, {false, std::string("exception: ") + e.what()});
    }
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

Outcome gradients() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    std::string where;
    for (int m = 0; m < 20; ++m) {
        const ModelSpec spec = testutil::random_micro_model(rng);
        const ModelWeights w = init_weights(spec, 100 + m);
        std::vector<Tensor> batch;
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < 2; ++i) {
            batch.push_back(testutil::random_tensor(spec.input_shape, rng));
            labels.push_back(i % spec.num_classes);
        }
        GradCheckOptions opt;
        opt.tolerance = kGradTolerance;
        const GradCheckReport r = grad_check(spec, w, batch, labels, opt);
        if (r.max_relative_error > worst) {
            worst = r.max_relative_error;
            where = "model " + std::to_string(m) + " " + r.worst_parameter;
        }
    }
    const double secs = seconds_since(t0);
    return {worst < kGradTolerance && secs < kGradBudgetSeconds,
            "20 micro models, max rel err " + fmt(worst) + " (" + where + "), " + fmt(secs) + " s"};
}

Outcome layer_oracles() {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> dim(1, 9), ch(1, 4), kern(1, 3), stride(1, 2), coin(0, 1);
    double worst_conv = 0, worst_dw = 0, worst_dense = 0;
    int cases = 0;
    while (cases < 100) {
        const std::size_t h = dim(rng), w = dim(rng), cin = ch(rng), cout = ch(rng), k = kern(rng), s = stride(rng);
        const bool same = coin(rng) == 1;
        if (!same && (h < k || w < k)) {
            continue;
        }
        ++cases;
        const Padding pad = same ? Padding::same : Padding::valid;
        const Tensor in = testutil::random_tensor({h, w, cin}, rng);
        const Tensor kc = testutil::random_tensor({k, k, cin, cout}, rng);
        const Tensor bc = testutil::random_tensor({cout}, rng);
        const Tensor out = conv2d(in, kc, bc, s, pad);
        const oracle::Map ref = oracle::conv2d(testutil::as_map(in), testutil::as_double(kc), k, cout,
                                               testutil::as_double(bc), s, same);
        if (out.size() != ref.v.size()) {
            return {false, "conv2d shape mismatch"};
        }
        for (std::size_t i = 0; i < out.size(); ++i) worst_conv = std::max(worst_conv, std::abs(out[i] - ref.v[i]));

        const Tensor kd = testutil::random_tensor({k, k, cin}, rng);
        const Tensor bd = testutil::random_tensor({cin}, rng);
        const Tensor dw = depthwise_conv2d(in, kd, bd, s, pad);
        const oracle::Map dref =
            oracle::depthwise(testutil::as_map(in), testutil::as_double(kd), k, testutil::as_double(bd), s, same);
        if (dw.size() != dref.v.size()) {
            return {false, "depthwise shape mismatch"};
        }
        for (std::size_t i = 0; i < dw.size(); ++i) worst_dw = std::max(worst_dw, std::abs(dw[i] - dref.v[i]));

        const std::size_t n = dim(rng) * 4, m = dim(rng);
        const Tensor x = testutil::random_tensor({n}, rng);
        const Tensor wd = testutil::random_tensor({n, m}, rng);
        const Tensor bdn = testutil::random_tensor({m}, rng);
        const Tensor y = dense(x, wd, bdn);
        const auto yref = oracle::dense(testutil::as_double(x), testutil::as_double(wd), testutil::as_double(bdn));
        for (std::size_t i = 0; i < m; ++i) worst_dense = std::max(worst_dense, std::abs(y[i] - yref[i]));
    }
    const double worst = std::max({worst_conv, worst_dw, worst_dense});
    return {worst <= kLayerTolerance, "100 cases each, max abs err conv " + fmt(worst_conv) + " depthwise " +
                                          fmt(worst_dw) + " dense " + fmt(worst_dense)};
}

Outcome kfold_invariants() {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> kd(2, 10), nd(0, 400);
    for (int t = 0; t < 200; ++t) {
        const std::size_t k = kd(rng), n = k + nd(rng);
        const FoldPlan plan = kfold_plan(n, k, rng());
        std::vector<int> seen(n, 0);
        std::size_t lo = n, hi = 0;
        for (const auto& fold : plan.folds) {
            lo = std::min(lo, fold.size());
            hi = std::max(hi, fold.size());
            for (std::size_t i : fold) {
                if (i >= n) return {false, "index out of range"};
                ++seen[i];
            }
        }
        if (plan.k() != k || hi - lo > 1 || std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
            return {false, "n=" + std::to_string(n) + " k=" + std::to_string(k) + " violates partition"};
        }
    }
    // Instrumented CV: every evaluated item is absent from that fold's training set.
    const SynthData d = generate_synth(3, 17, 8, 3);
    std::vector<Example> ex;
    for (std::size_t i = 0; i < d.images.size(); ++i) ex.push_back({d.images[i], d.dataset.items[i].label});
    const FoldPlan plan = kfold_plan(ex.size(), 5, 1);
    std::vector<int> evaluated(ex.size(), 0);
    bool leak = false;
    std::size_t trained_items = 0;
    const TrainFn recording = [&](const TrainConfig& c, std::span<const Example> tr, std::size_t classes) {
        trained_items += tr.size();
        TrainConfig quick = c;
        quick.epochs = 1;
        quick.stem_channels = 4;
        quick.blocks = 1;
        return train(quick, tr, classes);
    };
    const FoldObserver observer = [&](std::size_t, std::span<const std::size_t> tr, std::span<const std::size_t> ev) {
        const std::set<std::size_t> train_set(tr.begin(), tr.end());
        for (std::size_t i : ev) {
            leak = leak || train_set.count(i) != 0;
            ++evaluated[i];
        }
    };
    cross_validate(TrainConfig{}, ex, 3, plan, recording, observer);
    const bool once = std::all_of(evaluated.begin(), evaluated.end(), [](int c) { return c == 1; });
    return {!leak && once && trained_items == 4 * ex.size(),
            "200 random (n,k) partitions; CV leak=" + std::string(leak ? "yes" : "no") +
                ", every item evaluated once=" + (once ? "yes" : "no")};
}

Outcome preprocessing() {
    std::vector<std::string> bad;
    const CropWindow win = centered_window(Image(300, 200), 200, 200);
    if (win.x != 50 || win.x + win.width != 250 || win.y != 0 || win.height != 200) bad.push_back("300x200 window");
    Image sq(64, 64);
    std::mt19937_64 rng(1);
    for (auto& p : sq.pixels) p = static_cast<std::uint8_t>(rng());
    if (center_crop_square(sq) != sq) bad.push_back("square pass-through");

    int worst = 0;
    std::uniform_int_distribution<std::size_t> dim(1, 40);
    for (int t = 0; t < 50; ++t) {
        Image img(dim(rng), dim(rng));
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
        const std::size_t ow = dim(rng), oh = dim(rng);
        const Image out = resize_to(img, ow, oh);
        const std::vector<int> px(img.pixels.begin(), img.pixels.end());
        const std::vector<int> ref = oracle::bilinear(px, img.width, img.height, ow, oh);
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out.pixels[i] - ref[i]));
    }
    if (worst > kResizeTolerance) bad.push_back("bilinear off by " + std::to_string(worst));

    const Image src = render_synth_image(1, 32, 4);
    for (std::uint64_t seed : {0ULL, 7ULL, 12345ULL}) {
        if (augment(src, seed) != augment(src, seed)) bad.push_back("augment seed " + std::to_string(seed));
    }
    std::string detail = "crop x in [50,250), square pass-through, resize max diff " + std::to_string(worst) +
                         ", augment deterministic";
    for (const auto& b : bad) detail += "; bad: " + b;
    return {bad.empty(), detail};
}

// Shared end-to-end artefacts.
struct EndToEnd {
    std::vector<std::string> classes;
    std::vector<Example> train, test;
    SweepReport sweep;
    TrainResult model;
    double top1 = 0.0;
    double seconds = 0.0;
};

EndToEnd run_end_to_end() {
    const auto t0 = Clock::now();
    EndToEnd e;
    const SynthData data = generate_synth(kClasses, kPerClass, kSide, kDataSeed);
    e.classes = data.dataset.class_names;
    std::map<std::string, const Image*> by_name;
    for (std::size_t i = 0; i < data.images.size(); ++i) by_name[data.dataset.items[i].image] = &data.images[i];
    const TrainTestSplit split = split_train_test(data.dataset, kTestFraction, kDataSeed);
    for (const auto& it : split.train.items) e.train.push_back({*by_name.at(it.image), it.label});
    for (const auto& it : split.test.items) e.test.push_back({*by_name.at(it.image), it.label});
    const SweepStages stages = acceptance_stages();
    e.sweep = run_sweep(e.train, kClasses, stages);
    e.model = final_train(e.sweep.winner, e.train, kClasses, stages.final_epochs);
    e.top1 = top1_accuracy(e.model.weights, e.model.spec, e.test);
    e.seconds = seconds_since(t0);
    return e;
}

Outcome ensemble_math(const EndToEnd& e) {
    TrainConfig other = e.sweep.winner;
    other.seed += 1000;
    const TrainResult second = final_train(other, e.train, kClasses, acceptance_stages().final_epochs);
    const EnsembleModel ens(e.classes, {{e.model.spec, e.model.weights}, {second.spec, second.weights}});
    std::size_t hits = 0, mismatches = 0;
    for (const Example& ex : e.test) {
        const Tensor x = to_tensor(ex.image);
        const Tensor p = ensemble_predict(ens, x);
        const Tensor a = forward_one(e.model.spec, e.model.weights, x);
        const Tensor b = forward_one(second.spec, second.weights, x);
        for (std::size_t c = 0; c < kClasses; ++c) {
            const auto mean = static_cast<float>((static_cast<long double>(a[c]) + b[c]) / 2);
            mismatches += p[c] == mean ? 0 : 1;
        }
        hits += argmax_class(p.values()).index == ex.label ? 1 : 0;
    }
    const double ens_top1 = static_cast<double>(hits) / static_cast<double>(e.test.size());
    const double m1 = e.top1, m2 = top1_accuracy(second.weights, second.spec, e.test);

    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> len(1, 20);
    std::uniform_int_distribution<int> coarse(0, 9);
    std::size_t argmax_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<float> v(len(rng));
        for (float& x : v) x = static_cast<float>(coarse(rng)) / 9.0F;
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] > v[j]; });
        argmax_bad += argmax_class(v).index == order[0] ? 0 : 1;
    }
    return {mismatches == 0 && ens_top1 >= std::min(m1, m2) && argmax_bad == 0,
            "mean mismatches " + std::to_string(mismatches) + ", ensemble top1 " + fmt(ens_top1) + " vs members " +
                fmt(m1) + "/" + fmt(m2) + ", argmax disagreements " + std::to_string(argmax_bad) + "/1000"};
}

Outcome quantization(const EndToEnd& e) {
    const ModelWeights& w = e.model.weights;
    const ModelWeights h = quantize_f16(w), q = quantize_i8(w);
    const double full = static_cast<double>(payload_bytes(w));
    const double r16 = payload_bytes(h) / full, r8 = payload_bytes(q) / full;
    const double a32 = e.top1, a16 = top1_accuracy(h, e.model.spec, e.test), a8 = top1_accuracy(q, e.model.spec, e.test);

    const fs::path dir = fs::temp_directory_path() / "flora_acceptance_q";
    fs::create_directories(dir);
    const ModelBundle one{e.classes, {{e.model.spec, h}}};
    const ModelBundle two{e.classes, {{e.model.spec, h}, {e.model.spec, q}}};
    save_bundle(two, dir / "ens.fmdl");
    const LoadedModel back16 = [&] {
        save(e.model.spec, h, e.classes, dir / "m16.fmdl");
        return load(dir / "m16.fmdl");
    }();
    const bool sum_ok = payload_bytes(two) == payload_bytes(h) + payload_bytes(q) &&
                        payload_bytes(load_bundle(dir / "ens.fmdl")) == payload_bytes(two) &&
                        back16.weights.tensors == h.tensors && payload_bytes(one) == payload_bytes(h);
    fs::remove_all(dir);
    const bool pass = std::abs(r16 - kF16RatioTarget) <= kRatioTolerance &&
                      std::abs(r8 - kI8RatioTarget) <= kRatioTolerance && a32 - a16 <= kMaxF16Drop &&
                      a32 - a8 <= kMaxI8Drop && sum_ok;
    return {pass, "ratio f16 " + fmt(r16) + " i8 " + fmt(r8) + "; top1 f32 " + fmt(a32) + " f16 " + fmt(a16) +
                      " i8 " + fmt(a8) + "; ensemble payload = member sum: " + (sum_ok ? "yes" : "no")};
}

Outcome service_contract(const EndToEnd& e) {
    const fs::path dir = fs::temp_directory_path() / "flora_acceptance_svc";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto model = std::make_shared<const EnsembleModel>(
        e.classes, std::vector<MemberModel>{{e.model.spec, quantize_f16(e.model.weights)}});
    Classifier core(model, "synth", synth_species_store(e.classes), dir / "feedback.jsonl", dir / "thumbnails");
    HttpService service(core);
    const int port = service.bind("127.0.0.1", 0);
    std::thread th([&] { service.run(); });
    service.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);

    std::vector<std::string> bad;
    auto expect = [&](const httplib::Result& r, int status, const std::string& what) {
        if (!r || r->status != status) {
            bad.push_back(what + " -> " + (r ? std::to_string(r->status) : "no response"));
            return false;
        }
        return true;
    };
    // A fresh disk image at a larger size, never seen in training.
    const auto png = encode_png(render_synth_image(0, 64, 987654321));
    const std::string bytes(png.begin(), png.end());
    const httplib::MultipartFormDataItems form{{"image", bytes, "disk.png", "image/png"}};
    std::string id, top_species;
    double top_p = 0.0;
    if (auto r = cli.Post("/api/classify?k=3", form); expect(r, 200, "classify")) {
        const auto j = nlohmann::json::parse(r->body);
        id = j["request_id"];
        top_species = j["predictions"][0]["species"];
        top_p = j["predictions"][0]["probability"];
        if (top_species != "disk" || top_p <= 0.5) bad.push_back("disk classified as " + top_species);
        expect(cli.Get(j["thumbnail"].get<std::string>()), 200, "thumbnail");
    }
    const httplib::MultipartFormDataItems junk{{"image", "not an image", "x.png", "image/png"}};
    expect(cli.Post("/api/classify", junk), 400, "undecodable upload");
    const httplib::MultipartFormDataItems huge{{"image", std::string(kMaxUploadBytes + 1, 'x'), "x.png", "image/png"}};
    expect(cli.Post("/api/classify", huge), 413, "oversized upload");
    expect(cli.Get("/api/species/Quercus%20imaginaria"), 404, "unknown species lookup");
    const nlohmann::json wrong{{"request_id", id}, {"confirmed_species", "Quercus imaginaria"}};
    expect(cli.Post("/api/feedback", wrong.dump(), "application/json"), 422, "feedback with unknown species");
    const nlohmann::json ghost{{"request_id", "00000000-1"}, {"confirmed_species", "disk"}};
    expect(cli.Post("/api/feedback", ghost.dump(), "application/json"), 404, "feedback for unknown request");
    const nlohmann::json ok{{"request_id", id}, {"confirmed_species", "disk"}};
    expect(cli.Post("/api/feedback", ok.dump(), "application/json"), 204, "feedback");
    const std::size_t lines_after_first = read_feedback_lines(dir / "feedback.jsonl").size();
    expect(cli.Post("/api/feedback", ok.dump(), "application/json"), 204, "feedback resubmitted");
    const auto latest = read_feedback(dir / "feedback.jsonl");
    if (lines_after_first != 1) bad.push_back("first feedback wrote " + std::to_string(lines_after_first) + " lines");
    if (latest.size() != 1 || latest.begin()->second.confirmed_species != "disk") {
        bad.push_back("resubmission changed the effective log");
    }
    service.stop();
    th.join();
    fs::remove_all(dir);
    std::string detail = "disk -> " + top_species + " p=" + fmt(top_p) + ", error paths 400/413/404/422/404, log idempotent";
    for (const auto& b : bad) detail += "; bad: " + b;
    return {bad.empty(), detail};
}

}  // namespace

int main() {
    run("gradient correctness", gradients);
    run("layer oracles", layer_oracles);
    run("k-fold invariants", kfold_invariants);
    run("preprocessing goldens", preprocessing);

    EndToEnd e;
    bool have_model = false;
    run("end-to-end synth pipeline", [&] {
        e = run_end_to_end();
        have_model = true;
        return Outcome{e.top1 >= kMinTestTop1 && e.seconds <= kEndToEndBudgetSeconds,
                       "winner " + e.sweep.winner.label() + ", test top1 " + fmt(e.top1) + " on " +
                           std::to_string(e.test.size()) + " images, " + fmt(e.seconds) + " s"};
    });
    if (have_model) {
        run("ensemble math", [&] { return ensemble_math(e); });
        run("quantization parity", [&] { return quantization(e); });
        run("service contract", [&] { return service_contract(e); });
    } else {
        for (const char* name : {"ensemble math", "quantization parity", "service contract"}) {
            report(name, {false, "no end-to-end model"});
        }
    }
    std::printf("%d failed\n", failures);
    return failures == 0 ? 0 : 1;
}
