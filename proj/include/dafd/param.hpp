#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dafd/tensor.hpp"

namespace dafd {

/// A domain label. Index 0 is always the source domain.
struct DomainId {
    int index = 0;
    std::string name = "source";

    bool operator==(const DomainId& o) const { return index == o.index; }
};

/// Owner tag for a parameter block: -1 for cross-domain shared, otherwise the domain index.
inline constexpr int kShared = -1;

/// A named trainable block with its gradient accumulator and momentum buffer.
template <typename T>
struct Param {
    std::string name;
    Shape4 shape;  // logical shape, used by checkpoints
    int owner = kShared;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<T> velocity;

    Param() = default;
    Param(std::string n, Shape4 s, int own)
        : name(std::move(n)), shape(s), owner(own), value(s.size(), T(0)), grad(s.size(), T(0)),
          velocity(s.size(), T(0)) {}

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

}  // namespace dafd
