#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace flora {

struct LabeledItem {
    /// Image file name, relative to the dataset root.
    std::string image;
    std::size_t label = 0;

    friend bool operator==(const LabeledItem&, const LabeledItem&) = default;
};

struct LabeledDataset {
    std::vector<LabeledItem> items;
    /// Species identifiers; a label is an index into this list.
    std::vector<std::string> class_names;
    std::filesystem::path root;

    std::size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
    std::filesystem::path path_of(const LabeledItem& item) const { return root / item.image; }

    /// Throws DataError on out-of-range labels or duplicate image names.
    void validate() const;

    friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
        return a.items == b.items && a.class_names == b.class_names;
    }
};

struct LoadReport {
    LabeledDataset dataset;
    /// Images listed in the CSV that do not exist under the root.
    std::vector<std::string> missing;
};

/// Rows are `image_name,species`, UTF-8, no header. Fields containing a comma
/// or a double quote are double-quoted with "" escapes. Classes are numbered
/// in order of first appearance.
LabeledDataset parse_labels(std::istream& in);
LoadReport load_labels(const std::filesystem::path& csv, const std::filesystem::path& image_root);
/// A directory argument resolves to <dir>/labels.csv with the directory as root.
LoadReport load_labels(const std::filesystem::path& csv_or_dir);

void write_labels(const LabeledDataset& ds, std::ostream& out);
void save_labels(const LabeledDataset& ds, const std::filesystem::path& csv);

/// Items at the given indices, same class list and root.
LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices);

std::vector<std::size_t> class_counts(const LabeledDataset& ds);

struct TrainTestSplit {
    LabeledDataset train;
    LabeledDataset test;
};

/// Stratified split. The test set holds round(n * fraction) items apportioned
/// across classes by largest remainder; every non-empty class keeps at least
/// one training item. Membership depends on the seed, sizes do not.
TrainTestSplit split_train_test(const LabeledDataset& ds, double test_fraction, std::uint64_t seed);

struct FoldPlan {
    std::vector<std::vector<std::size_t>> folds;

    std::size_t k() const { return folds.size(); }
    /// Every index not in fold `held_out`, ascending.
    std::vector<std::size_t> training_indices(std::size_t held_out) const;
};

/// Shuffles 0..n-1 and cuts it into k contiguous folds; the first n % k folds
/// get one extra item.
FoldPlan kfold_plan(std::size_t n, std::size_t k = 5, std::uint64_t seed = 0);

struct AuditReport {
    std::size_t minimum = 0;
    /// (class name, count) for each class under the minimum.
    std::vector<std::pair<std::string, std::size_t>> below;

    bool ok() const { return below.empty(); }
};

inline constexpr std::size_t kMinImagesPerClass = 100;

/// Flags classes with fewer than `minimum` images. With `strict` a non-empty
/// report is raised as DataError.
AuditReport audit_min_count(const LabeledDataset& ds, std::size_t minimum = kMinImagesPerClass, bool strict = false);

}  // namespace flora
