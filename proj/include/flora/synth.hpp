#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flora/dataset.hpp"
#include "flora/image.hpp"
#include "flora/species.hpp"

namespace flora {

// Procedural stand-in for a species dataset: each class is a shape family
// (disk, triangle, stripes, cross, square, ring, then numbered variants)
// drawn with random position, size, rotation and colours plus pixel noise, so
// colour alone never identifies the class.

/// "disk", "triangle", "stripes", "cross", "square", "ring", "shape7", ...
std::vector<std::string> synth_class_names(std::size_t num_classes);

/// One image of class `class_index`, fully determined by `seed`.
Image render_synth_image(std::size_t class_index, std::size_t side, std::uint64_t seed);

struct SynthData {
    LabeledDataset dataset;
    /// Decoded images, parallel to dataset.items.
    std::vector<Image> images;
};

/// In-memory generation. Items are ordered class by class; names are
/// "<class>_<nnnn>.png".
SynthData generate_synth(std::size_t num_classes, std::size_t per_class, std::size_t side, std::uint64_t seed);

/// Species records for the synthetic classes (types cycle native/endemic/exotic).
SpeciesStore synth_species_store(const std::vector<std::string>& class_names);

/// Writes every image as PNG under `out_dir`, plus labels.csv and species.json.
/// Returns the dataset rooted at `out_dir`.
LabeledDataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                             const std::filesystem::path& out_dir);

}  // namespace flora
