#include "flora/species.hpp"

#include <fstream>

#include "flora/errors.hpp"

namespace flora {

std::string to_string(SpeciesType type) {
    switch (type) {
        case SpeciesType::native: return "native";
        case SpeciesType::endemic: return "endemic";
        case SpeciesType::exotic: return "exotic";
    }
    return "unknown";
}

SpeciesType species_type_from_string(const std::string& name) {
    if (name == "native") return SpeciesType::native;
    if (name == "endemic") return SpeciesType::endemic;
    if (name == "exotic") return SpeciesType::exotic;
    throw DataError("species type must be native, endemic or exotic, got '" + name + "'");
}

void to_json(nlohmann::json& j, const SpeciesRecord& r) {
    j = nlohmann::json{{"scientific_name", r.scientific_name},
                       {"common_names", r.common_names},
                       {"type", to_string(r.type)},
                       {"conservation_status", r.conservation_status},
                       {"distribution", r.distribution},
                       {"description", r.description},
                       {"image", r.image}};
}

void from_json(const nlohmann::json& j, SpeciesRecord& r) {
    r.scientific_name = j.at("scientific_name").get<std::string>();
    r.common_names = j.value("common_names", std::vector<std::string>{});
    r.type = species_type_from_string(j.at("type").get<std::string>());
    r.conservation_status = j.value("conservation_status", std::string{});
    r.distribution = j.value("distribution", std::string{});
    r.description = j.value("description", std::string{});
    r.image = j.value("image", std::string{});
}

SpeciesStore::SpeciesStore(std::vector<SpeciesRecord> records) : records_(std::move(records)) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
        if (records_[i].scientific_name.empty()) {
            throw DataError("species record " + std::to_string(i) + " has no scientific name");
        }
        if (!index_.emplace(records_[i].scientific_name, i).second) {
            throw DataError("duplicate species " + records_[i].scientific_name);
        }
    }
}

SpeciesStore SpeciesStore::from_json(const nlohmann::json& doc) {
    try {
        const int version = doc.value("version", 1);
        if (version != 1) {
            throw DataError("unsupported species store version " + std::to_string(version));
        }
        return SpeciesStore(doc.at("species").get<std::vector<SpeciesRecord>>());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed species store: ") + e.what());
    }
}

SpeciesStore SpeciesStore::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open species store " + path.string());
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return from_json(doc);
}

nlohmann::json SpeciesStore::to_json() const {
    return nlohmann::json{{"version", 1}, {"species", records_}};
}

void SpeciesStore::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write species store " + path.string());
    }
    out << to_json().dump(2) << '\n';
}

const SpeciesRecord* SpeciesStore::find(const std::string& scientific_name) const {
    const auto it = index_.find(scientific_name);
    return it == index_.end() ? nullptr : &records_[it->second];
}

const SpeciesRecord& SpeciesStore::lookup(const std::string& scientific_name) const {
    const SpeciesRecord* record = find(scientific_name);
    if (record == nullptr) {
        throw NotFoundError("species not found: '" + scientific_name + "'");
    }
    return *record;
}

std::array<std::size_t, 3> SpeciesStore::type_counts() const {
    std::array<std::size_t, 3> counts{0, 0, 0};
    for (const SpeciesRecord& r : records_) {
        counts[static_cast<std::size_t>(r.type)] += 1;
    }
    return counts;
}

}  // namespace flora
