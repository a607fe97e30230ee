#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace bus {

// Fixed word list: special tokens first, then colors, shapes, and template
// words. Ids are dense from 0 and identical in every build.
class Vocab {
public:
    static const Vocab& instance();

    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const;       // throws DataError if unknown
    bool contains(const std::string& word) const { return ids_.count(word) > 0; }
    const std::string& word(int id) const;

    int pad() const { return pad_; }
    int cls() const { return cls_; }
    int sep() const { return sep_; }
    int mask() const { return mask_; }
    bool is_special(int id) const { return id == pad_ || id == cls_ || id == sep_ || id == mask_; }

    // Whitespace tokenization + vocabulary lookup; unknown words throw.
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

private:
    Vocab();
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
    int pad_ = 0, cls_ = 0, sep_ = 0, mask_ = 0;
};

} // namespace bus
