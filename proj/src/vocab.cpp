#include "bus/vocab.hpp"

#include "bus/errors.hpp"

#include <sstream>

namespace bus {

namespace {

// Palette names double as caption color words; shape kinds as class words.
const char* kWords[] = {
    "[PAD]", "[CLS]", "[SEP]", "[MASK]",
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white", "purple", "teal",
    "square", "circle",
    "this", "is", "a",
    "left", "right", "above", "below", "of",
    "big", "small",
    "alone", "in", "the", "image",
};

} // namespace

Vocab::Vocab() {
    for (const char* w : kWords) {
        ids_.emplace(w, static_cast<int>(words_.size()));
        words_.emplace_back(w);
    }
    pad_ = ids_.at("[PAD]");
    cls_ = ids_.at("[CLS]");
    sep_ = ids_.at("[SEP]");
    mask_ = ids_.at("[MASK]");
}

const Vocab& Vocab::instance() {
    static const Vocab v;
    return v;
}

int Vocab::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw DataError("word not in vocabulary: '" + word + "'");
    return it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

} // namespace bus
