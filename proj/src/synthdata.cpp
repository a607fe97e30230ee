#include "bus/synthdata.hpp"

#include "bus/errors.hpp"
#include "bus/objectives.hpp"
#include "bus/rng.hpp"
#include "bus/vocab.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace bus {

namespace {

struct PaletteEntry {
    const char* name;
    std::uint8_t r, g, b;
};

// Color values are exact u8, so the f64 image (v/255) round-trips the shard
// byte store losslessly.
const PaletteEntry kPalette[] = {
    {"red", 220, 40, 40},   {"green", 40, 200, 60},   {"blue", 50, 80, 230},
    {"yellow", 230, 220, 50}, {"magenta", 210, 50, 200}, {"cyan", 60, 210, 210},
    {"orange", 240, 140, 40}, {"white", 245, 245, 245}, {"purple", 140, 60, 200},
    {"teal", 40, 140, 140},
};
constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));

struct Shape {
    bool is_circle = false;
    int color = 0;     // palette index
    BoundingBox box;   // exact pixel bounds of the rendered shape
    int cx = 0, cy = 0, radius = 0;
};

bool boxes_touch(const BoundingBox& a, const BoundingBox& b) {
    return a.x < b.x + b.w + 1 && b.x < a.x + a.w + 1 &&
           a.y < b.y + b.h + 1 && b.y < a.y + a.h + 1;
}

void render(std::vector<std::uint8_t>& rgb, int W, const Shape& s) {
    const auto& c = kPalette[s.color];
    if (s.is_circle) {
        const int r2 = s.radius * s.radius;
        for (int y = s.cy - s.radius; y <= s.cy + s.radius; ++y)
            for (int x = s.cx - s.radius; x <= s.cx + s.radius; ++x) {
                const int dx = x - s.cx, dy = y - s.cy;
                if (dx * dx + dy * dy <= r2) {
                    const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
                    rgb[o] = c.r; rgb[o + 1] = c.g; rgb[o + 2] = c.b;
                }
            }
    } else {
        for (int y = s.box.y; y < s.box.y + s.box.h; ++y)
            for (int x = s.box.x; x < s.box.x + s.box.w; ++x) {
                const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
                rgb[o] = c.r; rgb[o + 1] = c.g; rgb[o + 2] = c.b;
            }
    }
}

std::string shape_phrase(const Shape& s) {
    return std::string(kPalette[s.color].name) + " " + (s.is_circle ? "circle" : "square");
}

// Little-endian byte IO.
void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > size) {
            throw FormatError(std::string("shard truncated reading ") + what + " at byte offset " + std::to_string(pos));
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(data[pos] | (data[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    void bytes(void* dst, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, data + pos, n);
        pos += n;
    }
};

constexpr char kMagic[4] = {'B', 'U', 'S', 'D'};
constexpr std::uint16_t kVersion = 1;

} // namespace

Tensor SynthSample::image() const {
    std::vector<double> pixels(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) pixels[i] = static_cast<double>(rgb[i]) / 255.0;
    return Tensor::from_data({height, width, 3}, std::move(pixels));
}

SynthSample generate(std::uint64_t seed, SampleKind kind, int image_size) {
    Rng rng = Rng(seed).split("synth");
    const int W = image_size, H = image_size;

    SynthSample sample;
    sample.seed = seed;
    sample.height = H;
    sample.width = W;
    sample.rgb.assign(static_cast<std::size_t>(H) * W * 3, 0);

    // Distinct colors via a partial Fisher-Yates over palette indices.
    int color_order[kPaletteSize];
    for (int i = 0; i < kPaletteSize; ++i) color_order[i] = i;
    for (int i = 0; i < kPaletteSize - 1; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(kPaletteSize - i)));
        std::swap(color_order[i], color_order[j]);
    }

    const int want = 1 + static_cast<int>(rng.next_below(3));
    std::vector<Shape> shapes;
    const int min_side = std::max(3, image_size / 8);
    const int max_side = std::max(min_side + 1, image_size / 3);
    for (int si = 0; si < want; ++si) {
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            Shape s;
            // Squares dominate 3:1. A disc's bounding box has empty corners,
            // so box-derived patch labels carry a bias there; keeping discs
            // the minority keeps that bias a small fraction of the labels.
            s.is_circle = rng.next_below(4) == 3;
            s.color = color_order[si];
            if (s.is_circle) {
                const int min_r = std::max(1, min_side / 2);
                const int max_r = std::max(min_r + 1, max_side / 2);
                s.radius = min_r + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_r - min_r + 1)));
                s.cx = s.radius + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(W - 2 * s.radius)));
                s.cy = s.radius + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(H - 2 * s.radius)));
                s.box = {s.cx - s.radius, s.cy - s.radius, 2 * s.radius + 1, 2 * s.radius + 1};
            } else {
                const int side = min_side + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_side - min_side + 1)));
                const int x = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(W - side + 1)));
                const int y = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(H - side + 1)));
                s.box = {x, y, side, side};
                s.cx = x + side / 2;
                s.cy = y + side / 2;
            }
            bool clear = true;
            for (const auto& other : shapes) {
                if (boxes_touch(s.box, other.box)) { clear = false; break; }
            }
            if (clear) {
                shapes.push_back(s);
                placed = true;
            }
        }
        if (!placed) break; // crowded image: settle for fewer shapes
    }
    for (const auto& s : shapes) render(sample.rgb, W, s);

    const auto& vocab = Vocab::instance();
    const int described = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(shapes.size())));
    const Shape& subject = shapes[static_cast<std::size_t>(described)];

    if (kind == SampleKind::Region) {
        sample.has_box = true;
        sample.box = subject.box;
        sample.label = shape_phrase(subject);
        sample.caption = class_label_to_text(sample.label);
    } else {
        std::string caption = "a " + shape_phrase(subject);
        if (shapes.size() >= 2) {
            int other = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(shapes.size() - 1)));
            if (other >= described) ++other;
            const Shape& ref = shapes[static_cast<std::size_t>(other)];
            const int dx = subject.cx - ref.cx;
            const int dy = subject.cy - ref.cy;
            const char* rel = std::abs(dx) >= std::abs(dy) ? (dx < 0 ? "left" : "right")
                                                           : (dy < 0 ? "above" : "below");
            caption += std::string(" ") + rel + " of a " + shape_phrase(ref);
        } else {
            caption += " alone in the image";
        }
        sample.caption = vocab.tokenize(caption);
    }
    return sample;
}

void write_shard(const std::string& path, const std::vector<SynthSample>& samples) {
    std::string out;
    out.append(kMagic, 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        put_u64(out, s.seed);
        put_u16(out, static_cast<std::uint16_t>(s.height));
        put_u16(out, static_cast<std::uint16_t>(s.width));
        out.append(reinterpret_cast<const char*>(s.rgb.data()), s.rgb.size());
        put_u16(out, static_cast<std::uint16_t>(s.caption.size()));
        for (int id : s.caption) put_u16(out, static_cast<std::uint16_t>(id));
        out.push_back(s.has_box ? 1 : 0);
        if (s.has_box) {
            put_u16(out, static_cast<std::uint16_t>(s.box.x));
            put_u16(out, static_cast<std::uint16_t>(s.box.y));
            put_u16(out, static_cast<std::uint16_t>(s.box.w));
            put_u16(out, static_cast<std::uint16_t>(s.box.h));
        }
        put_u16(out, static_cast<std::uint16_t>(s.label.size()));
        out.append(s.label);
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw FormatError("cannot open shard for writing: " + path);
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw FormatError("short write to shard: " + path);
}

std::vector<SynthSample> read_shard(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw FormatError("cannot open shard: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    Cursor cur{raw.data(), raw.size()};

    char magic[4];
    cur.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad shard magic in " + path);
    const std::uint16_t version = cur.u16("version");
    if (version != kVersion) throw FormatError("unsupported shard version " + std::to_string(version));
    const std::uint32_t count = cur.u32("sample count");

    std::vector<SynthSample> samples;
    samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        SynthSample s;
        s.seed = cur.u64("seed");
        s.height = cur.u16("height");
        s.width = cur.u16("width");
        s.rgb.resize(static_cast<std::size_t>(s.height) * s.width * 3);
        cur.bytes(s.rgb.data(), s.rgb.size(), "pixels");
        const std::uint16_t cap_len = cur.u16("caption length");
        s.caption.resize(cap_len);
        for (std::uint16_t j = 0; j < cap_len; ++j) s.caption[j] = cur.u16("caption id");
        std::uint8_t has_box = 0;
        cur.bytes(&has_box, 1, "box flag");
        s.has_box = has_box != 0;
        if (s.has_box) {
            s.box.x = cur.u16("box.x");
            s.box.y = cur.u16("box.y");
            s.box.w = cur.u16("box.w");
            s.box.h = cur.u16("box.h");
        }
        const std::uint16_t label_len = cur.u16("label length");
        s.label.resize(label_len);
        if (label_len) cur.bytes(s.label.data(), label_len, "label");
        samples.push_back(std::move(s));
    }
    if (cur.pos != cur.size) {
        throw FormatError("trailing bytes in shard after sample " + std::to_string(count) +
                          " at byte offset " + std::to_string(cur.pos));
    }
    return samples;
}

} // namespace bus
