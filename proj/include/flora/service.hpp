#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flora/ensemble.hpp"
#include "flora/species.hpp"

namespace flora {

inline constexpr std::size_t kMaxUploadBytes = 10 * 1024 * 1024;
inline constexpr std::size_t kDefaultTopK = 5;
inline constexpr std::size_t kThumbnailSide = 128;

struct FeedbackRecord {
    std::string request_id;
    std::string predicted_species;
    std::string confirmed_species;
    /// UTC seconds since the epoch.
    std::int64_t timestamp = 0;

    friend bool operator==(const FeedbackRecord&, const FeedbackRecord&) = default;
};

void to_json(nlohmann::json& j, const FeedbackRecord& record);
void from_json(const nlohmann::json& j, FeedbackRecord& record);

/// Append-only JSON-lines log. Each record is written with one append-mode
/// write() of the complete line, so an interrupted process can at worst lose
/// the line in flight, never damage earlier ones. Appends are serialized.
class FeedbackLog {
public:
    explicit FeedbackLog(std::filesystem::path path);

    void append(const FeedbackRecord& record);
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::mutex mutex_;
};

/// Every line in file order. A torn final line (no newline) is ignored.
std::vector<FeedbackRecord> read_feedback_lines(const std::filesystem::path& path);
/// Latest confirmation per request id.
std::map<std::string, FeedbackRecord> read_feedback(const std::filesystem::path& path);

/// 64-bit FNV-1a of the bytes as 16 lowercase hex digits.
std::string content_hash(std::span<const std::uint8_t> bytes);

struct Prediction {
    std::string species;
    float probability = 0.0F;
    /// Null when the species store has no entry for the class.
    const SpeciesRecord* record = nullptr;
};

struct ClassificationResult {
    std::string request_id;
    /// Non-increasing probability.
    std::vector<Prediction> predictions;
    /// URL path of the stored thumbnail, e.g. "/thumbnails/<hash>.png".
    std::string thumbnail;
    std::string model_name;
};

nlohmann::json to_json(const ClassificationResult& result);

enum class FeedbackStatus { accepted, unknown_request, unknown_species };

/// HTTP-independent core: classification, request bookkeeping and feedback.
class Classifier {
public:
    /// `model` may be null; classify() then throws ModelUnavailable.
    Classifier(std::shared_ptr<const EnsembleModel> model, std::string model_name, SpeciesStore species,
               std::filesystem::path feedback_log, std::filesystem::path thumbnail_dir);

    bool model_loaded() const { return model_ != nullptr; }
    const SpeciesStore& species() const { return species_; }
    const std::string& model_name() const { return model_name_; }
    const std::filesystem::path& thumbnail_dir() const { return thumbnail_dir_; }

    /// center_crop_square -> resize(model side) -> to_tensor -> ensemble
    /// average -> top_k. Throws DataError for undecodable bytes.
    ClassificationResult classify(std::span<const std::uint8_t> image_bytes, std::size_t k = kDefaultTopK);

    /// Full probability vector for the bytes, in model class order.
    Tensor probabilities(std::span<const std::uint8_t> image_bytes) const;

    FeedbackStatus feedback(const std::string& request_id, const std::string& confirmed_species);

private:
    std::shared_ptr<const EnsembleModel> model_;
    std::string model_name_;
    SpeciesStore species_;
    FeedbackLog log_;
    std::filesystem::path thumbnail_dir_;

    std::mutex requests_mutex_;
    /// request id -> predicted top-1 species
    std::map<std::string, std::string> requests_;
    std::string session_;
    std::uint64_t counter_ = 0;
};

struct ModelUnavailable : std::runtime_error {
    ModelUnavailable() : std::runtime_error("no model loaded") {}
};

struct ServiceConfig {
    std::filesystem::path model;
    std::filesystem::path species;
    std::string host = "0.0.0.0";
    int port = 8080;
    std::filesystem::path feedback_log = "feedback.jsonl";
    std::filesystem::path static_dir;
    std::filesystem::path thumbnail_dir = "thumbnails";
};

/// Overrides `defaults` with FLORA_MODEL, FLORA_SPECIES, FLORA_HOST, FLORA_PORT,
/// FLORA_FEEDBACK_LOG, FLORA_STATIC_DIR and FLORA_THUMBNAIL_DIR.
ServiceConfig config_from_env(ServiceConfig defaults = {});

/// Loads the model bundle (if configured) and species store.
std::unique_ptr<Classifier> make_classifier(const ServiceConfig& config);

/// HTTP front end over a Classifier.
///
///   POST /api/classify?k=N       multipart field "image" (or a raw body)
///   POST /api/feedback           {"request_id", "confirmed_species"} -> 204
///   GET  /api/species            every SpeciesRecord
///   GET  /api/species/{name}     one SpeciesRecord or 404
///   GET  /api/health             model status
///   GET  /thumbnails/<hash>.png  stored captures
///   GET  /...                    static web bundle when configured
class HttpService {
public:
    HttpService(Classifier& classifier, const std::filesystem::path& static_dir = {});
    ~HttpService();
    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    /// Binds; port 0 picks a free one. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void run();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace flora
