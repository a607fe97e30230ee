#pragma once

#include "bus/config.hpp"
#include "bus/nn.hpp"
#include "bus/sequence.hpp"
#include "bus/summarizer.hpp"
#include "bus/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bus {

struct TextEncoding {
    Tensor t_cls;                   // [d]
    Tensor sequence;                // [(1+m)xd], slot 0 = [CLS]
    std::vector<int> token_ids;     // padded to m, no [CLS]
    std::vector<bool> attention_mask; // per sequence slot
};

class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, int vocab_size, Rng& rng);

    // ids must fit in m and be inside the vocabulary; padding slots are
    // masked out of attention.
    TextEncoding encode(const std::vector<int>& ids) const;

private:
    Tensor token_embed_; // [V x d]
    Tensor pos_embed_;   // [(1+m) x d]
    std::vector<EncoderBlock> blocks_;
    LayerNormParams final_ln_;
    int max_len_ = 0;
    int cls_id_ = 0;
    int pad_id_ = 0;
};

// ViT backbone with the key-patch-extraction hook between layers k and k+1.
class VisionEncoder {
public:
    struct ForwardResult {
        PatchSequence seq;              // final states (CLS + retained [+ fusion])
        std::optional<SaliencyRecord> saliency; // captured at layer k when KPE ran
        Tensor img_cls;                 // [1 x d]
    };

    VisionEncoder() = default;
    VisionEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, Rng& rng);

    // Embeds patches, adds position embeddings, prepends [CLS].
    PatchSequence patchify(const Tensor& image) const;

    // Runs layers 1..k on the full sequence, applies KPE (when a selector is
    // given and cfg.kpe_enabled), then layers k+1..N on the reduced sequence.
    // `text` must already be encoded when a selector is supplied.
    ForwardResult forward(const Tensor& image, const TextEncoding* text, double beta,
                          const TspsHead* selector, const Config& cfg);

    // Head-averaged attention of the image [CLS] to each patch at layer k,
    // from the most recent forward. Throws StateError before any forward.
    Tensor cls_attention() const;
    const std::vector<Tensor>& cls_attention_heads() const;

private:
    Linear patch_embed_;
    Tensor cls_token_;  // [1 x d]
    Tensor pos_embed_;  // [(1+n) x d]
    std::vector<EncoderBlock> blocks_;
    LayerNormParams final_ln_;
    int patch_size_ = 0;
    int n_patches_ = 0;

    std::optional<Tensor> last_cls_attention_;
    std::vector<Tensor> last_head_rows_;
};

struct FusedStates {
    Tensor states;                 // [(1+s)+(1+m) x d]
    int visual_len = 0;            // slots occupied by the visual summary
    int text_cls_slot = 0;         // joint representation slot (ITM)
    std::vector<bool> key_mask;    // padding mask over fused slots
};

class FusionEncoder {
public:
    FusionEncoder() = default;
    FusionEncoder(ParamStore& store, const std::string& prefix, const Config& cfg, Rng& rng);

    FusedStates fuse(const PatchSequence& summary, const TextEncoding& text) const;

private:
    std::vector<EncoderBlock> blocks_;
    LayerNormParams final_ln_;
};

class GenDecoder {
public:
    GenDecoder() = default;
    GenDecoder(ParamStore& store, const std::string& prefix, const Config& cfg, int vocab_size, Rng& rng);

    // Autoregressive logits over [BOS] + prefix: row t predicts the token at
    // position t. Position t sees targets < t plus every fused state.
    Tensor decode(const FusedStates& fused, const std::vector<int>& target_prefix) const;

private:
    Tensor token_embed_;
    Tensor pos_embed_;   // [(1+m) x d]
    std::vector<CrossBlock> blocks_;
    LayerNormParams final_ln_;
    Linear lm_head_;
    int max_len_ = 0;
    int bos_id_ = 0;
};

// Weight checkpoint container: magic "BUSC", version u16, tensor count u32;
// per tensor: name length u16 + bytes, rank u8, extents u32 each, then
// little-endian IEEE-754 doubles. Round-trips bit-exactly.
struct NamedTensorFile {
    std::vector<std::pair<std::string, Tensor>> entries;
};

void write_tensor_file(const std::string& path, const NamedTensorFile& file);
NamedTensorFile read_tensor_file(const std::string& path);

void save_params(const std::string& path, const ParamStore& store,
                 const std::vector<std::pair<std::string, Tensor>>& extra = {});
// Copies stored payloads into the matching registered parameters.
void load_params(const std::string& path, ParamStore& store,
                 std::vector<std::pair<std::string, Tensor>>* extra_out = nullptr);

} // namespace bus
