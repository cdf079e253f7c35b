#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace danp {

class MalformedTaskError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// One meta-learning task: n points with d_x inputs and d_y outputs, plus
/// the (0-based) indices of the context points. Every other point is a
/// target.
struct TaskBatch {
    std::size_t d_x = 0;
    std::size_t d_y = 0;
    std::vector<double> x;  // n x d_x, row-major
    std::vector<double> y;  // n x d_y, row-major
    std::vector<std::size_t> context;

    std::size_t n() const { return d_x ? x.size() / d_x : 0; }
    std::span<const double> x_row(std::size_t k) const { return {x.data() + k * d_x, d_x}; }
    std::span<const double> y_row(std::size_t k) const { return {y.data() + k * d_y, d_y}; }

    std::vector<std::size_t> sorted_context() const;
    /// Ascending complement of the context.
    std::vector<std::size_t> targets() const;
    std::vector<bool> context_flags() const;

    /// Throws MalformedTaskError when dims are zero, arrays are ragged,
    /// values are non-finite, or the context is empty / not a strict subset.
    void validate() const;

    friend bool operator==(const TaskBatch&, const TaskBatch&) = default;
};

}  // namespace danp
