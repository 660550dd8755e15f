#include "flora/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "httplib.h"

#include "flora/errors.hpp"
#include "flora/image.hpp"
#include "flora/modelstore.hpp"

namespace flora {

void to_json(nlohmann::json& j, const FeedbackRecord& record) {
    j = nlohmann::json{{"request_id", record.request_id},
                       {"predicted_species", record.predicted_species},
                       {"confirmed_species", record.confirmed_species},
                       {"timestamp", record.timestamp}};
}

void from_json(const nlohmann::json& j, FeedbackRecord& record) {
    j.at("request_id").get_to(record.request_id);
    j.at("predicted_species").get_to(record.predicted_species);
    j.at("confirmed_species").get_to(record.confirmed_species);
    j.at("timestamp").get_to(record.timestamp);
}

FeedbackLog::FeedbackLog(std::filesystem::path path) : path_(std::move(path)) {}

void FeedbackLog::append(const FeedbackRecord& record) {
    const std::string line = nlohmann::json(record).dump() + "\n";
    std::lock_guard lock(mutex_);
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) {
        throw DataError("cannot open feedback log " + path_.string() + ": " + std::strerror(errno));
    }
    const ssize_t written = ::write(fd, line.data(), line.size());
    const int saved = errno;
    ::close(fd);
    if (written != static_cast<ssize_t>(line.size())) {
        throw DataError("short write to feedback log " + path_.string() + ": " + std::strerror(saved));
    }
}

std::vector<FeedbackRecord> read_feedback_lines(const std::filesystem::path& path) {
    std::vector<FeedbackRecord> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        return out;
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t start = 0;
    while (start < text.size()) {
        const std::size_t end = text.find('\n', start);
        if (end == std::string::npos) {
            break;  // torn tail
        }
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(nlohmann::json::parse(line).get<FeedbackRecord>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed feedback line in " + path.string() + ": " + e.what());
        }
    }
    return out;
}

std::map<std::string, FeedbackRecord> read_feedback(const std::filesystem::path& path) {
    std::map<std::string, FeedbackRecord> latest;
    for (FeedbackRecord& r : read_feedback_lines(path)) {
        latest[r.request_id] = std::move(r);
    }
    return latest;
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
        h >>= 4;
    }
    return out;
}

nlohmann::json to_json(const ClassificationResult& result) {
    nlohmann::json predictions = nlohmann::json::array();
    for (const Prediction& p : result.predictions) {
        predictions.push_back({{"species", p.species},
                               {"probability", p.probability},
                               {"record", p.record != nullptr ? nlohmann::json(*p.record) : nlohmann::json()}});
    }
    return nlohmann::json{{"request_id", result.request_id},
                          {"model", result.model_name},
                          {"thumbnail", result.thumbnail},
                          {"predictions", predictions}};
}

Classifier::Classifier(std::shared_ptr<const EnsembleModel> model, std::string model_name, SpeciesStore species,
                       std::filesystem::path feedback_log, std::filesystem::path thumbnail_dir)
    : model_(std::move(model)),
      model_name_(std::move(model_name)),
      species_(std::move(species)),
      log_(std::move(feedback_log)),
      thumbnail_dir_(std::move(thumbnail_dir)) {
    if (model_ && model_->input_shape().size() != 3) {
        throw DataError("the service needs an image model, got input " + shape_string(model_->input_shape()));
    }
    std::filesystem::create_directories(thumbnail_dir_);
    // Earlier sessions' requests stay correctable.
    for (const auto& [id, record] : read_feedback(log_.path())) {
        requests_[id] = record.predicted_species;
    }
    std::random_device rd;
    const std::uint64_t prefix = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    const std::uint8_t* raw = reinterpret_cast<const std::uint8_t*>(&prefix);
    session_ = content_hash(std::span(raw, sizeof(prefix))).substr(0, 8);
}

Tensor Classifier::probabilities(std::span<const std::uint8_t> image_bytes) const {
    if (!model_) {
        throw ModelUnavailable();
    }
    const Image img = decode_image(image_bytes);
    const Shape& shape = model_->input_shape();
    const Image prepared = resize_to(center_crop_square(img), shape[1], shape[0]);
    return model_->predict(to_tensor(prepared));
}

ClassificationResult Classifier::classify(std::span<const std::uint8_t> image_bytes, std::size_t k) {
    if (!model_) {
        throw ModelUnavailable();
    }
    if (k == 0) {
        throw DataError("k must be at least 1");
    }
    const Image img = decode_image(image_bytes);
    const Shape& shape = model_->input_shape();
    const Image square = center_crop_square(img);
    const Tensor probs = model_->predict(to_tensor(resize_to(square, shape[1], shape[0])));

    ClassificationResult result;
    result.model_name = model_name_;
    for (const ClassScore& s : top_k(probs.values(), k)) {
        const std::string& name = model_->class_names()[s.index];
        result.predictions.push_back({name, s.probability, species_.find(name)});
    }

    const std::string hash = content_hash(image_bytes);
    const std::filesystem::path thumb = thumbnail_dir_ / (hash + ".png");
    if (!std::filesystem::exists(thumb)) {
        // Write-then-rename so a concurrent reader never sees a partial file.
        const std::filesystem::path tmp = thumb.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
        write_png(tmp, resize(square, std::min(kThumbnailSide, square.width)));
        std::filesystem::rename(tmp, thumb);
    }
    result.thumbnail = "/thumbnails/" + hash + ".png";

    std::lock_guard lock(requests_mutex_);
    std::ostringstream id;
    id << session_ << '-' << ++counter_;
    result.request_id = id.str();
    requests_[result.request_id] = result.predictions.front().species;
    return result;
}

FeedbackStatus Classifier::feedback(const std::string& request_id, const std::string& confirmed_species) {
    std::string predicted;
    {
        std::lock_guard lock(requests_mutex_);
        const auto it = requests_.find(request_id);
        if (it == requests_.end()) {
            return FeedbackStatus::unknown_request;
        }
        predicted = it->second;
    }
    if (!species_.contains(confirmed_species)) {
        return FeedbackStatus::unknown_species;
    }
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    log_.append({request_id, predicted, confirmed_species,
                 std::chrono::duration_cast<std::chrono::seconds>(now).count()});
    return FeedbackStatus::accepted;
}

ServiceConfig config_from_env(ServiceConfig config) {
    auto env = [](const char* name) -> const char* {
        const char* v = std::getenv(name);
        return v != nullptr && *v != '\0' ? v : nullptr;
    };
    if (const char* v = env("FLORA_MODEL")) config.model = v;
    if (const char* v = env("FLORA_SPECIES")) config.species = v;
    if (const char* v = env("FLORA_HOST")) config.host = v;
    if (const char* v = env("FLORA_PORT")) {
        try {
            config.port = std::stoi(v);
        } catch (const std::exception&) {
            throw DataError(std::string("FLORA_PORT is not a number: ") + v);
        }
    }
    if (const char* v = env("FLORA_FEEDBACK_LOG")) config.feedback_log = v;
    if (const char* v = env("FLORA_STATIC_DIR")) config.static_dir = v;
    if (const char* v = env("FLORA_THUMBNAIL_DIR")) config.thumbnail_dir = v;
    return config;
}

std::unique_ptr<Classifier> make_classifier(const ServiceConfig& config) {
    std::shared_ptr<const EnsembleModel> model;
    std::string name;
    if (!config.model.empty()) {
        model = std::make_shared<const EnsembleModel>(to_ensemble(load_bundle(config.model)));
        name = config.model.stem().string();
    }
    SpeciesStore species = config.species.empty() ? SpeciesStore{} : SpeciesStore::load(config.species);
    return std::make_unique<Classifier>(std::move(model), std::move(name), std::move(species), config.feedback_log,
                                        config.thumbnail_dir);
}

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const nlohmann::json& body) {
    res.set_content(body.dump(), "application/json");
}

}  // namespace

struct HttpService::Impl {
    Classifier& classifier;
    httplib::Server server;

    explicit Impl(Classifier& c) : classifier(c) {}

    void classify(const httplib::Request& req, httplib::Response& res) {
        std::size_t k = kDefaultTopK;
        if (req.has_param("k")) {
            const std::string text = req.get_param_value("k");
            try {
                std::size_t used = 0;
                const long long v = std::stoll(text, &used);
                if (used != text.size() || v < 1) {
                    throw std::invalid_argument(text);
                }
                k = static_cast<std::size_t>(v);
            } catch (const std::exception&) {
                return send_error(res, 400, "k must be a positive integer, got '" + text + "'");
            }
        }
        std::string_view body;
        if (req.is_multipart_form_data()) {
            // Views into req.files; get_file_value() returns a temporary.
            const auto named = req.files.find("image");
            if (named != req.files.end()) {
                body = named->second.content;
            } else if (!req.files.empty()) {
                body = req.files.begin()->second.content;
            }
        } else {
            body = req.body;
        }
        if (body.empty()) {
            return send_error(res, 400, "no image in request");
        }
        if (body.size() > kMaxUploadBytes) {
            return send_error(res, 413, "image larger than 10 MiB");
        }
        if (!classifier.model_loaded()) {
            return send_error(res, 503, "no model loaded");
        }
        const std::span bytes(reinterpret_cast<const std::uint8_t*>(body.data()), body.size());
        try {
            send_json(res, to_json(classifier.classify(bytes, k)));
        } catch (const DataError& e) {
            send_error(res, 400, std::string("cannot decode image: ") + e.what());
        }
    }

    void feedback(const httplib::Request& req, httplib::Response& res) {
        std::string request_id;
        std::string species;
        try {
            const auto j = nlohmann::json::parse(req.body);
            j.at("request_id").get_to(request_id);
            j.at("confirmed_species").get_to(species);
        } catch (const nlohmann::json::exception&) {
            return send_error(res, 400, "expected JSON {\"request_id\": ..., \"confirmed_species\": ...}");
        }
        switch (classifier.feedback(request_id, species)) {
            case FeedbackStatus::accepted: res.status = 204; break;
            case FeedbackStatus::unknown_request: send_error(res, 404, "unknown request id '" + request_id + "'"); break;
            case FeedbackStatus::unknown_species: send_error(res, 422, "unknown species '" + species + "'"); break;
        }
    }

    void routes(const std::filesystem::path& static_dir) {
        server.set_payload_max_length(kMaxUploadBytes + 64 * 1024);  // room for multipart framing
        server.Post("/api/classify", [this](const auto& req, auto& res) { classify(req, res); });
        server.Post("/api/feedback", [this](const auto& req, auto& res) { feedback(req, res); });
        server.Get("/api/species", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, classifier.species().to_json()["species"]);
        });
        server.Get(R"(/api/species/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
            const SpeciesRecord* record = classifier.species().find(req.matches[1].str());
            if (record == nullptr) {
                return send_error(res, 404, "unknown species '" + req.matches[1].str() + "'");
            }
            send_json(res, *record);
        });
        server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, {{"model_loaded", classifier.model_loaded()},
                            {"model", classifier.model_name()},
                            {"species", classifier.species().size()}});
        });
        server.set_mount_point("/thumbnails", classifier.thumbnail_dir().string());
        if (!static_dir.empty() && !server.set_mount_point("/", static_dir.string())) {
            throw DataError("static directory " + static_dir.string() + " does not exist");
        }
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                send_error(res, res.status, httplib::status_message(res.status));
            }
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                send_error(res, 500, e.what());
            } catch (...) {
                send_error(res, 500, "internal error");
            }
        });
    }
};

HttpService::HttpService(Classifier& classifier, const std::filesystem::path& static_dir)
    : impl_(std::make_unique<Impl>(classifier)) {
    impl_->routes(static_dir);
}

HttpService::~HttpService() = default;

int HttpService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) {
            throw DataError("cannot bind " + host);
        }
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw DataError("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void HttpService::run() { impl_->server.listen_after_bind(); }

void HttpService::stop() { impl_->server.stop(); }

void HttpService::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace flora
