#pragma once

#include "bus/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bus {

// Axis-aligned pixel rectangle; x,y is the top-left corner, w,h the extent.
struct BoundingBox {
    int x = 0, y = 0, w = 0, h = 0;
};

enum class SampleKind { Paired, Region };

// One synthetic scene: colored shapes on black, a templated caption, and for
// region samples the exact bounding box and class label of one shape.
struct SynthSample {
    std::uint64_t seed = 0;
    int height = 0, width = 0;
    std::vector<std::uint8_t> rgb;    // H*W*3, the canonical pixel store
    std::vector<int> caption;         // token ids, no [CLS]
    bool has_box = false;
    BoundingBox box;
    std::string label;                // "<color> <shape>" for region samples

    Tensor image() const;             // [HxWx3] doubles in [0,1], rgb/255
};

// Pure function of (seed, kind, image_size): shapes are placed with integer
// arithmetic only, so pixels, boxes, and patch overlap are exact on every
// platform.
SynthSample generate(std::uint64_t seed, SampleKind kind, int image_size);

// Shard container. Little-endian throughout: magic "BUSD", version u16,
// count u32; per sample: seed u64, H u16, W u16, raw RGB bytes, caption
// length u16 + ids (u16 each), has_box u8, box 4xu16, label length u16 +
// bytes.
void write_shard(const std::string& path, const std::vector<SynthSample>& samples);
std::vector<SynthSample> read_shard(const std::string& path);

} // namespace bus
