#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace flora {

enum class SpeciesType { native, endemic, exotic };

std::string to_string(SpeciesType type);
SpeciesType species_type_from_string(const std::string& name);

struct SpeciesRecord {
    std::string scientific_name;
    std::vector<std::string> common_names;
    SpeciesType type = SpeciesType::native;
    std::string conservation_status;
    std::string distribution;
    std::string description;
    /// Reference image shown next to the user's capture.
    std::string image;

    friend bool operator==(const SpeciesRecord&, const SpeciesRecord&) = default;
};

void to_json(nlohmann::json& j, const SpeciesRecord& record);
void from_json(const nlohmann::json& j, SpeciesRecord& record);

/// Read-only species metadata keyed by scientific name.
///
/// On-disk form (UTF-8 JSON):
///   {"version": 1, "species": [ {"scientific_name": ..., "common_names": [...],
///     "type": "native"|"endemic"|"exotic", "conservation_status": ...,
///     "distribution": ..., "description": ..., "image": ...}, ... ]}
class SpeciesStore {
public:
    SpeciesStore() = default;
    explicit SpeciesStore(std::vector<SpeciesRecord> records);

    static SpeciesStore load(const std::filesystem::path& path);
    static SpeciesStore from_json(const nlohmann::json& doc);
    nlohmann::json to_json() const;
    void save(const std::filesystem::path& path) const;

    /// Throws NotFoundError for unknown names (including "").
    const SpeciesRecord& lookup(const std::string& scientific_name) const;
    const SpeciesRecord* find(const std::string& scientific_name) const;
    bool contains(const std::string& scientific_name) const { return find(scientific_name) != nullptr; }

    const std::vector<SpeciesRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }

    /// Counts indexed by SpeciesType: native, endemic, exotic.
    std::array<std::size_t, 3> type_counts() const;

private:
    std::vector<SpeciesRecord> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace flora
