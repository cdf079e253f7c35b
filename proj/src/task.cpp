#include "danp/task.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace danp {

std::vector<std::size_t> TaskBatch::sorted_context() const {
    auto c = context;
    std::sort(c.begin(), c.end());
    return c;
}

std::vector<bool> TaskBatch::context_flags() const {
    std::vector<bool> flags(n(), false);
    for (auto k : context)
        if (k < flags.size()) flags[k] = true;
    return flags;
}

std::vector<std::size_t> TaskBatch::targets() const {
    auto flags = context_flags();
    std::vector<std::size_t> t;
    for (std::size_t k = 0; k < flags.size(); ++k)
        if (!flags[k]) t.push_back(k);
    return t;
}

void TaskBatch::validate() const {
    if (d_x == 0 || d_y == 0)
        throw MalformedTaskError("task dimensions must be positive (d_x=" + std::to_string(d_x) +
                                 ", d_y=" + std::to_string(d_y) + ")");
    if (x.size() % d_x != 0) throw MalformedTaskError("x has " + std::to_string(x.size()) + " values, not a multiple of d_x");
    const std::size_t count = n();
    if (y.size() != count * d_y)
        throw MalformedTaskError("y has " + std::to_string(y.size()) + " values, expected " +
                                 std::to_string(count * d_y));
    for (double v : x)
        if (!std::isfinite(v)) throw MalformedTaskError("non-finite input value");
    for (double v : y)
        if (!std::isfinite(v)) throw MalformedTaskError("non-finite output value");
    if (context.empty()) throw MalformedTaskError("context set is empty");
    auto sorted = sorted_context();
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw MalformedTaskError("context indices repeat");
    if (sorted.back() >= count)
        throw MalformedTaskError("context index " + std::to_string(sorted.back()) + " out of range for n=" +
                                 std::to_string(count));
    if (sorted.size() >= count) throw MalformedTaskError("context must be a strict subset (no targets left)");
}

}  // namespace danp
