#include "flora/ensemble.hpp"

#include <algorithm>
#include <numeric>

#include "flora/errors.hpp"

namespace flora {

EnsembleModel::EnsembleModel(std::vector<std::string> class_names, std::vector<MemberModel> members)
    : class_names_(std::move(class_names)), members_(std::move(members)) {
    if (members_.empty()) {
        throw DataError("an ensemble needs at least one member");
    }
    for (std::size_t j = 0; j < members_.size(); ++j) {
        const MemberModel& m = members_[j];
        check_weights(m.spec, m.weights);
        if (m.spec.num_classes != class_names_.size()) {
            throw DataError("member " + std::to_string(j) + " predicts " + std::to_string(m.spec.num_classes) +
                            " classes, the ensemble has " + std::to_string(class_names_.size()));
        }
        if (m.spec.input_shape != members_.front().spec.input_shape) {
            throw DataError("member " + std::to_string(j) + " expects input " + shape_string(m.spec.input_shape) +
                            ", member 0 expects " + shape_string(members_.front().spec.input_shape));
        }
    }
}

EnsembleModel EnsembleModel::from_members(
    const std::vector<std::pair<std::vector<std::string>, MemberModel>>& members) {
    if (members.empty()) {
        throw DataError("an ensemble needs at least one member");
    }
    const std::vector<std::string>& reference = members.front().first;
    std::vector<MemberModel> models;
    for (std::size_t j = 0; j < members.size(); ++j) {
        if (members[j].first != reference) {
            throw DataError("member " + std::to_string(j) +
                            " has a different class list (content or order) than member 0");
        }
        models.push_back(members[j].second);
    }
    return EnsembleModel(reference, std::move(models));
}

Tensor average_probabilities(std::span<const Tensor> member_outputs) {
    if (member_outputs.empty()) {
        throw DataError("cannot average zero probability vectors");
    }
    const std::size_t n = member_outputs.front().size();
    std::vector<double> sums(n, 0.0);
    for (const Tensor& p : member_outputs) {
        if (p.size() != n) {
            throw ShapeError("probability vectors differ in length");
        }
        for (std::size_t i = 0; i < n; ++i) {
            sums[i] += p[i];
        }
    }
    const auto m = static_cast<double>(member_outputs.size());
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(sums[i] / m);
    }
    return out;
}

Tensor EnsembleModel::predict(const Tensor& input) const {
    std::vector<Tensor> outputs;
    outputs.reserve(members_.size());
    for (const MemberModel& m : members_) {
        outputs.push_back(forward_one(m.spec, m.weights, input));
    }
    return average_probabilities(outputs);
}

Tensor ensemble_predict(const EnsembleModel& ensemble, const Tensor& input) { return ensemble.predict(input); }

ClassScore argmax_class(std::span<const float> probabilities) {
    const std::size_t best = argmax(probabilities);
    return {best, probabilities[best]};
}

std::vector<ClassScore> top_k(std::span<const float> probabilities, std::size_t k) {
    std::vector<std::size_t> order(probabilities.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t keep = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (probabilities[a] != probabilities[b]) {
                              return probabilities[a] > probabilities[b];
                          }
                          return a < b;
                      });
    std::vector<ClassScore> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        out.push_back({order[i], probabilities[order[i]]});
    }
    return out;
}

}  // namespace flora
