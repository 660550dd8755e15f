#include "flora/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "flora/errors.hpp"

namespace flora {

namespace {

// Splits one CSV record. Handles quoted fields with "" escapes; no multi-line fields.
std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    bool was_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"' && field.empty() && !was_quoted) {
            quoted = true;
            was_quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(field));
            field.clear();
            was_quoted = false;
        } else {
            field.push_back(ch);
        }
    }
    if (quoted) {
        throw DataError("line " + std::to_string(line_no) + ": unterminated quoted field");
    }
    fields.push_back(std::move(field));
    return fields;
}

std::string quote_field(const std::string& value) {
    if (value.find_first_of(",\"\n") == std::string::npos) {
        return value;
    }
    std::string out = "\"";
    for (char ch : value) {
        if (ch == '"') {
            out += "\"\"";
        } else {
            out.push_back(ch);
        }
    }
    out.push_back('"');
    return out;
}

}  // namespace

void LabeledDataset::validate() const {
    std::unordered_set<std::string> seen;
    for (const LabeledItem& item : items) {
        if (item.label >= class_names.size()) {
            throw DataError("item " + item.image + " has label " + std::to_string(item.label) + " but only " +
                            std::to_string(class_names.size()) + " classes exist");
        }
        if (!seen.insert(item.image).second) {
            throw DataError("duplicate image name " + item.image);
        }
    }
}

LabeledDataset parse_labels(std::istream& in) {
    LabeledDataset ds;
    std::unordered_map<std::string, std::size_t> class_index;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) {
            line.erase(0, 3);
        }
        if (line.empty()) {
            continue;
        }
        const std::vector<std::string> fields = split_record(line, line_no);
        if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
            throw DataError("line " + std::to_string(line_no) + ": expected `image_name,species`, got '" + line + "'");
        }
        if (!seen.insert(fields[0]).second) {
            throw DataError("line " + std::to_string(line_no) + ": duplicate image name " + fields[0]);
        }
        auto [it, inserted] = class_index.try_emplace(fields[1], ds.class_names.size());
        if (inserted) {
            ds.class_names.push_back(fields[1]);
        }
        ds.items.push_back({fields[0], it->second});
    }
    if (ds.items.empty()) {
        throw DataError("label file has no rows");
    }
    return ds;
}

LoadReport load_labels(const std::filesystem::path& csv, const std::filesystem::path& image_root) {
    std::ifstream in(csv);
    if (!in) {
        throw DataError("cannot open label file " + csv.string());
    }
    LoadReport report;
    try {
        report.dataset = parse_labels(in);
    } catch (const DataError& e) {
        throw DataError(csv.string() + ": " + e.what());
    }
    report.dataset.root = image_root;
    for (const LabeledItem& item : report.dataset.items) {
        if (!std::filesystem::exists(image_root / item.image)) {
            report.missing.push_back(item.image);
        }
    }
    return report;
}

LoadReport load_labels(const std::filesystem::path& csv_or_dir) {
    if (std::filesystem::is_directory(csv_or_dir)) {
        return load_labels(csv_or_dir / "labels.csv", csv_or_dir);
    }
    return load_labels(csv_or_dir, csv_or_dir.parent_path());
}

void write_labels(const LabeledDataset& ds, std::ostream& out) {
    for (const LabeledItem& item : ds.items) {
        out << quote_field(item.image) << ',' << quote_field(ds.class_names.at(item.label)) << '\n';
    }
}

void save_labels(const LabeledDataset& ds, const std::filesystem::path& csv) {
    std::ofstream out(csv);
    if (!out) {
        throw DataError("cannot write label file " + csv.string());
    }
    write_labels(ds, out);
}

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices) {
    LabeledDataset out;
    out.class_names = ds.class_names;
    out.root = ds.root;
    out.items.reserve(indices.size());
    for (std::size_t i : indices) {
        out.items.push_back(ds.items.at(i));
    }
    return out;
}

std::vector<std::size_t> class_counts(const LabeledDataset& ds) {
    std::vector<std::size_t> counts(ds.class_names.size(), 0);
    for (const LabeledItem& item : ds.items) {
        counts.at(item.label) += 1;
    }
    return counts;
}

TrainTestSplit split_train_test(const LabeledDataset& ds, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw DataError("test fraction must lie in [0, 1)");
    }
    const std::size_t num_classes = ds.class_names.size();
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        by_class.at(ds.items[i].label).push_back(i);
    }

    const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(ds.size()) * test_fraction));
    std::vector<std::size_t> quota(num_classes, 0);
    std::vector<double> remainder(num_classes, 0.0);
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t count = by_class[c].size();
        const double exact = static_cast<double>(count) * test_fraction;
        const std::size_t cap = count == 0 ? 0 : count - 1;
        quota[c] = std::min(static_cast<std::size_t>(std::floor(exact)), cap);
        remainder[c] = exact - static_cast<double>(quota[c]);
        assigned += quota[c];
    }
    std::vector<std::size_t> order(num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    // Hand out the leftover test slots by largest remainder, then round-robin
    // in the same order if caps swallowed some of them.
    bool progress = true;
    while (assigned < target && progress) {
        progress = false;
        for (std::size_t c : order) {
            if (assigned >= target) {
                break;
            }
            const std::size_t count = by_class[c].size();
            if (count > 0 && quota[c] < count - 1) {
                ++quota[c];
                ++assigned;
                progress = true;
            }
        }
    }

    std::mt19937_64 rng(seed);
    std::vector<bool> in_test(ds.size(), false);
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<std::size_t> members = by_class[c];
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t j = 0; j < quota[c]; ++j) {
            in_test[members[j]] = true;
        }
    }
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        (in_test[i] ? test_idx : train_idx).push_back(i);
    }
    return {subset(ds, train_idx), subset(ds, test_idx)};
}

std::vector<std::size_t> FoldPlan::training_indices(std::size_t held_out) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        if (f != held_out) {
            out.insert(out.end(), folds[f].begin(), folds[f].end());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

FoldPlan kfold_plan(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) {
        throw DataError("k-fold needs k >= 2, got " + std::to_string(k));
    }
    if (k > n) {
        throw DataError("cannot cut " + std::to_string(n) + " items into " + std::to_string(k) + " folds");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    FoldPlan plan;
    const std::size_t base = n / k, extra = n % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        std::vector<std::size_t> fold(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                      order.begin() + static_cast<std::ptrdiff_t>(pos + len));
        std::sort(fold.begin(), fold.end());
        plan.folds.push_back(std::move(fold));
        pos += len;
    }
    return plan;
}

AuditReport audit_min_count(const LabeledDataset& ds, std::size_t minimum, bool strict) {
    if (ds.empty()) {
        throw DataError("cannot audit an empty dataset");
    }
    AuditReport report;
    report.minimum = minimum;
    const std::vector<std::size_t> counts = class_counts(ds);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] < minimum) {
            report.below.emplace_back(ds.class_names[c], counts[c]);
        }
    }
    if (strict && !report.ok()) {
        std::ostringstream msg;
        msg << report.below.size() << " class(es) below " << minimum << " images:";
        for (const auto& [name, count] : report.below) {
            msg << ' ' << name << '(' << count << ')';
        }
        throw DataError(msg.str());
    }
    return report;
}

}  // namespace flora
