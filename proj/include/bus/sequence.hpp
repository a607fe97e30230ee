#pragma once

#include "bus/tensor.hpp"

#include <vector>

namespace bus {

// Grid index sentinels for non-patch slots.
inline constexpr int kClsIndex = -1;
inline constexpr int kFusionIndex = -2;

// Ordered visual token states with a distinguished [CLS] slot and the
// original-grid index retained per slot. Slot 0 is always [CLS]; a fusion
// token, when present, is the last slot and carries kFusionIndex.
struct PatchSequence {
    Tensor states;                 // [(1+count)xd]
    std::vector<int> grid_indices; // one per slot

    int slots() const { return static_cast<int>(grid_indices.size()); }
    int patch_count() const {
        int n = 0;
        for (int g : grid_indices) n += g >= 0 ? 1 : 0;
        return n;
    }
    bool has_fusion() const {
        return !grid_indices.empty() && grid_indices.back() == kFusionIndex;
    }
};

} // namespace bus
