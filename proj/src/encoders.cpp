#include "bus/encoders.hpp"

#include "bus/errors.hpp"
#include "bus/rng.hpp"
#include "bus/vocab.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace bus {

TextEncoder::TextEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, int vocab_size, Rng& rng)
    : final_ln_(store, prefix + ".ln_out", cfg.d),
      max_len_(cfg.max_text_len),
      cls_id_(Vocab::instance().cls()),
      pad_id_(Vocab::instance().pad()) {
    token_embed_ = store.create(prefix + ".tok", {vocab_size, cfg.d}, rng, 0.02);
    pos_embed_ = store.create(prefix + ".pos", {1 + cfg.max_text_len, cfg.d}, rng, 0.02);
    for (int i = 0; i < cfg.text_layers; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cfg.d, cfg.heads, rng);
    }
}

TextEncoding TextEncoder::encode(const std::vector<int>& ids) const {
    if (static_cast<int>(ids.size()) > max_len_) {
        throw DataError("text of " + std::to_string(ids.size()) + " tokens exceeds maximum " + std::to_string(max_len_));
    }
    TextEncoding enc;
    enc.token_ids = ids;
    enc.token_ids.resize(static_cast<std::size_t>(max_len_), pad_id_);
    std::vector<int> seq_ids = {cls_id_};
    seq_ids.insert(seq_ids.end(), enc.token_ids.begin(), enc.token_ids.end());

    enc.attention_mask.assign(static_cast<std::size_t>(1 + max_len_), false);
    enc.attention_mask[0] = true;
    for (std::size_t i = 0; i < ids.size(); ++i) enc.attention_mask[1 + i] = true;

    Tensor x = add(embedding(token_embed_, seq_ids), pos_embed_);
    Tensor mask = key_padding_mask(1 + max_len_, enc.attention_mask);
    for (const auto& block : blocks_) x = block.forward(x, &mask).out;
    enc.sequence = final_ln_(x);
    enc.t_cls = flatten(slice_rows(enc.sequence, 0, 1));
    return enc;
}

VisionEncoder::VisionEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, Rng& rng)
    : final_ln_(store, prefix + ".ln_out", cfg.d),
      patch_size_(cfg.patch_size),
      n_patches_(cfg.n_patches()) {
    patch_embed_ = Linear(store, prefix + ".patch", cfg.patch_size * cfg.patch_size * 3, cfg.d, rng);
    cls_token_ = store.create(prefix + ".cls", {1, cfg.d}, rng, 0.02);
    pos_embed_ = store.create(prefix + ".pos", {1 + cfg.n_patches(), cfg.d}, rng, 0.02);
    for (int i = 0; i < cfg.vit_layers; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cfg.d, cfg.heads, rng);
    }
}

PatchSequence VisionEncoder::patchify(const Tensor& image) const {
    Tensor patches = extract_patches(image, patch_size_); // [n x 3p^2]
    const int n = patches.dim(0);
    if (n != n_patches_) {
        throw ConfigError("image yields " + std::to_string(n) + " patches but the encoder was built for " +
                          std::to_string(n_patches_));
    }
    Tensor x = concat_rows({cls_token_, patch_embed_(patches)});
    PatchSequence seq;
    seq.states = add(x, pos_embed_);
    seq.grid_indices.resize(static_cast<std::size_t>(n) + 1);
    seq.grid_indices[0] = kClsIndex;
    std::iota(seq.grid_indices.begin() + 1, seq.grid_indices.end(), 0);
    return seq;
}

VisionEncoder::ForwardResult VisionEncoder::forward(const Tensor& image, const TextEncoding* text,
                                                    double beta, const TspsHead* selector, const Config& cfg) {
    if (beta < 0.0 || beta > 1.0) {
        throw ConfigError("vit_forward beta " + std::to_string(beta) + " outside [0,1]");
    }
    // A selector means "capture saliency at layer k"; pruning on top of the
    // capture is governed separately so the no-extraction ablation still
    // scores patches for abstraction and patch-text supervision.
    const bool capture = selector != nullptr;
    if (capture && text == nullptr) {
        throw StateError("vit_forward needs the text encoding before patch scoring");
    }

    PatchSequence seq = patchify(image);
    ForwardResult res;
    const int N = static_cast<int>(blocks_.size());
    for (int layer = 0; layer < N; ++layer) {
        const bool at_k = capture && layer == cfg.k - 1;
        auto block_out = blocks_[static_cast<std::size_t>(layer)].forward(seq.states, nullptr, at_k);
        seq.states = block_out.out;
        if (at_k) {
            // p_i: CLS row of the layer-k attention, patch columns only,
            // averaged over heads.
            const int n = seq.patch_count();
            last_head_rows_.clear();
            Tensor p_sum;
            for (const auto& probs : block_out.head_probs) {
                Tensor row = gather_elems(flatten(slice_rows(probs, 0, 1)),
                                          [&] {
                                              std::vector<int> idx(static_cast<std::size_t>(n));
                                              std::iota(idx.begin(), idx.end(), 1);
                                              return idx;
                                          }());
                last_head_rows_.push_back(row);
                p_sum = p_sum.defined() ? add(p_sum, row) : row;
            }
            Tensor p = scale(p_sum, 1.0 / static_cast<double>(block_out.head_probs.size()));
            last_cls_attention_ = p;

            Tensor patch_states = slice_rows(seq.states, 1, n);
            Tensor a = tsps_score(patch_states, text->t_cls, *selector);
            const double used_beta = cfg.text_guidance ? beta : 0.0;
            Tensor a_dot = mix_saliency(a, p, used_beta, cfg.norm);
            res.saliency = SaliencyRecord{a, p, a_dot, used_beta, cfg.norm};
            if (cfg.kpe_enabled) seq = kpe_select(seq, a_dot, cfg.alpha, cfg.fusion_token);
        }
    }
    seq.states = final_ln_(seq.states);
    res.img_cls = slice_rows(seq.states, 0, 1);
    res.seq = std::move(seq);
    return res;
}

Tensor VisionEncoder::cls_attention() const {
    if (!last_cls_attention_) throw StateError("cls_attention queried before a forward with key patch extraction");
    return *last_cls_attention_;
}

const std::vector<Tensor>& VisionEncoder::cls_attention_heads() const {
    if (last_head_rows_.empty()) throw StateError("cls_attention queried before a forward with key patch extraction");
    return last_head_rows_;
}

FusionEncoder::FusionEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, Rng& rng)
    : final_ln_(store, prefix + ".ln_out", cfg.d) {
    for (int i = 0; i < cfg.fusion_layers; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cfg.d, cfg.heads, rng);
    }
}

FusedStates FusionEncoder::fuse(const PatchSequence& summary, const TextEncoding& text) const {
    if (!summary.states.defined() || summary.slots() == 0) {
        throw StateError("fuse needs a non-empty visual summary");
    }
    FusedStates fused;
    fused.visual_len = summary.slots();
    fused.text_cls_slot = summary.slots();
    fused.key_mask.assign(static_cast<std::size_t>(summary.slots()), true);
    fused.key_mask.insert(fused.key_mask.end(), text.attention_mask.begin(), text.attention_mask.end());

    Tensor x = concat_rows({summary.states, text.sequence});
    Tensor mask = key_padding_mask(x.dim(0), fused.key_mask);
    for (const auto& block : blocks_) x = block.forward(x, &mask).out;
    fused.states = final_ln_(x);
    return fused;
}

GenDecoder::GenDecoder(ParamStore& store, const std::string& prefix, const Config& cfg, int vocab_size, Rng& rng)
    : final_ln_(store, prefix + ".ln_out", cfg.d),
      max_len_(cfg.max_text_len),
      bos_id_(Vocab::instance().cls()) {
    token_embed_ = store.create(prefix + ".tok", {vocab_size, cfg.d}, rng, 0.02);
    pos_embed_ = store.create(prefix + ".pos", {1 + cfg.max_text_len, cfg.d}, rng, 0.02);
    for (int i = 0; i < cfg.decoder_layers; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cfg.d, cfg.heads, rng);
    }
    lm_head_ = Linear(store, prefix + ".lm", cfg.d, vocab_size, rng);
}

Tensor GenDecoder::decode(const FusedStates& fused, const std::vector<int>& target_prefix) const {
    if (static_cast<int>(target_prefix.size()) > max_len_) {
        throw DataError("decoder prefix of " + std::to_string(target_prefix.size()) +
                        " tokens exceeds maximum " + std::to_string(max_len_));
    }
    std::vector<int> input_ids = {bos_id_};
    input_ids.insert(input_ids.end(), target_prefix.begin(), target_prefix.end());
    const int L = static_cast<int>(input_ids.size());

    Tensor x = add(embedding(token_embed_, input_ids), slice_rows(pos_embed_, 0, L));
    Tensor self_mask = causal_mask(L);
    Tensor cross_mask = key_padding_mask(L, fused.key_mask);
    for (const auto& block : blocks_) x = block.forward(x, fused.states, &self_mask, &cross_mask);
    return lm_head_(final_ln_(x));
}

// ---- checkpoint container ---------------------------------------------

namespace {

constexpr char kMagic[4] = {'B', 'U', 'S', 'C'};
constexpr std::uint16_t kVersion = 1;

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
            throw FormatError(std::string("checkpoint truncated reading ") + what +
                              " at byte offset " + std::to_string(pos));
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        auto v = static_cast<std::uint16_t>(data[pos] | (data[pos + 1] << 8));
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

std::uint64_t double_bits(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    return bits;
}

double bits_double(std::uint64_t bits) {
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

} // namespace

void write_tensor_file(const std::string& path, const NamedTensorFile& file) {
    std::string out;
    out.append(kMagic, 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(file.entries.size()));
    for (const auto& [name, tensor] : file.entries) {
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.append(name);
        out.push_back(static_cast<char>(tensor.rank()));
        for (int i = 0; i < tensor.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(tensor.dim(i)));
        for (double v : tensor.data()) put_u64(out, double_bits(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open checkpoint for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write to checkpoint: " + path);
}

NamedTensorFile read_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Cursor cur{raw.data(), raw.size()};

    char magic[4];
    cur.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path);
    const auto version = cur.u16("version");
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = cur.u32("tensor count");

    NamedTensorFile file;
    file.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = cur.u16("name length");
        std::string name(name_len, '\0');
        if (name_len) cur.bytes(name.data(), name_len, "name");
        std::uint8_t rank = 0;
        cur.bytes(&rank, 1, "rank");
        std::vector<int> shape(rank);
        std::int64_t n = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<int>(cur.u32("extent"));
            n *= shape[r];
        }
        std::vector<double> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = bits_double(cur.u64("payload"));
        file.entries.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return file;
}

void save_params(const std::string& path, const ParamStore& store,
                 const std::vector<std::pair<std::string, Tensor>>& extra) {
    NamedTensorFile file;
    for (const auto& name : store.names()) file.entries.emplace_back(name, store.get(name));
    for (const auto& e : extra) file.entries.push_back(e);
    write_tensor_file(path, file);
}

void load_params(const std::string& path, ParamStore& store,
                 std::vector<std::pair<std::string, Tensor>>* extra_out) {
    NamedTensorFile file = read_tensor_file(path);
    if (extra_out) extra_out->clear();
    for (auto& [name, tensor] : file.entries) {
        if (store.contains(name)) {
            Tensor dst = store.get(name);
            if (dst.shape() != tensor.shape()) {
                throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(tensor.shape()) +
                                  " but the model expects " + shape_str(dst.shape()));
            }
            dst.mutable_data() = tensor.data();
        } else if (extra_out) {
            extra_out->emplace_back(name, tensor);
        } else {
            throw FormatError("checkpoint tensor " + name + " has no matching parameter");
        }
    }
}

} // namespace bus
