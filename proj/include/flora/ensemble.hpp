#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flora/model.hpp"
#include "flora/tensor.hpp"

namespace flora {

struct MemberModel {
    ModelSpec spec;
    ModelWeights weights;
};

/// Probability-averaging ensemble. Every member predicts over the same
/// ordered class list, so position i means the same species for all of them.
class EnsembleModel {
public:
    /// Throws DataError when members disagree on class count or input shape,
    /// or when there are no members.
    EnsembleModel(std::vector<std::string> class_names, std::vector<MemberModel> members);

    /// Builds from (class list, member) pairs; all class lists must match in
    /// content and order.
    static EnsembleModel from_members(const std::vector<std::pair<std::vector<std::string>, MemberModel>>& members);

    const std::vector<std::string>& class_names() const { return class_names_; }
    const std::vector<MemberModel>& members() const { return members_; }
    std::size_t size() const { return members_.size(); }
    const Shape& input_shape() const { return members_.front().spec.input_shape; }

    /// Elementwise mean of the member probability vectors: sum_j p_j[i] / m.
    Tensor predict(const Tensor& input) const;

private:
    std::vector<std::string> class_names_;
    std::vector<MemberModel> members_;
};

/// Arithmetic mean of probability vectors of equal length.
Tensor average_probabilities(std::span<const Tensor> member_outputs);

Tensor ensemble_predict(const EnsembleModel& ensemble, const Tensor& input);

struct ClassScore {
    std::size_t index = 0;
    float probability = 0.0F;
    friend bool operator==(const ClassScore&, const ClassScore&) = default;
};

/// Maximum probability; ties go to the lowest index.
ClassScore argmax_class(std::span<const float> probabilities);

/// The k most probable classes in non-increasing order (ties by lower index);
/// k larger than the class count returns every class.
std::vector<ClassScore> top_k(std::span<const float> probabilities, std::size_t k);

}  // namespace flora
