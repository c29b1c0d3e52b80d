#include "shgvqa/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "shgvqa/errors.hpp"

namespace shgvqa {

std::string vocab_kind_name(VocabKind kind) {
    switch (kind) {
        case VocabKind::action: return "action";
        case VocabKind::predicate: return "predicate";
        case VocabKind::answer: return "answer";
        case VocabKind::word: return "word";
    }
    return "?";
}

Vocabulary Vocabulary::from_labels(VocabKind kind, std::vector<std::string> labels) {
    std::sort(labels.begin(), labels.end());
    Vocabulary v;
    v.kind_ = kind;
    v.labels_ = std::move(labels);
    for (std::size_t i = 0; i < v.labels_.size(); ++i) {
        auto [it, inserted] = v.index_.emplace(v.labels_[i], static_cast<std::int64_t>(i));
        if (!inserted) {
            throw SchemaError("duplicate " + vocab_kind_name(kind) + " label '" + v.labels_[i] + "'");
        }
    }
    return v;
}

Vocabulary Vocabulary::from_set(VocabKind kind, const std::set<std::string>& labels) {
    return from_labels(kind, std::vector<std::string>(labels.begin(), labels.end()));
}

const std::string& Vocabulary::label(std::int64_t index) const {
    if (index < 0 || index >= size()) {
        throw VocabError("unknown " + vocab_kind_name(kind_) + " class index " +
                         std::to_string(index) + " (vocabulary has " + std::to_string(size()) +
                         " labels)");
    }
    return labels_[static_cast<std::size_t>(index)];
}

std::int64_t Vocabulary::index(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) {
        throw VocabError("unknown " + vocab_kind_name(kind_) + " label '" + label + "'");
    }
    return it->second;
}

bool Vocabulary::contains(const std::string& label) const { return index_.count(label) != 0; }

std::int64_t Vocabulary::phi_index() const {
    if (!has_phi()) {
        throw VocabError(vocab_kind_name(kind_) + " vocabulary has no phi slot");
    }
    return size();
}

std::string flatten_triplet(const PredicateTriplet& t) {
    for (const std::string* part : {&t.subject, &t.relation, &t.object}) {
        if (part->find(kTripletSeparator) != std::string::npos) {
            throw SchemaError("triplet component '" + *part + "' contains the separator '" +
                              kTripletSeparator + "'");
        }
        if (part->empty()) {
            throw SchemaError("triplet component is empty");
        }
    }
    return t.subject + kTripletSeparator + t.relation + kTripletSeparator + t.object;
}

PredicateTriplet unflatten_triplet(const std::string& s) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    const std::string sep = kTripletSeparator;
    while (true) {
        const std::size_t next = s.find(sep, pos);
        if (next == std::string::npos) {
            parts.push_back(s.substr(pos));
            break;
        }
        parts.push_back(s.substr(pos, next - pos));
        pos = next + sep.size();
    }
    if (parts.size() != 3 || parts[0].empty() || parts[1].empty() || parts[2].empty()) {
        throw SchemaError("cannot unflatten predicate label '" + s +
                          "': expected subject--relation--object");
    }
    return PredicateTriplet{parts[0], parts[1], parts[2]};
}

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (char raw : text) {
        const unsigned char c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            if (!current.empty()) {
                words.push_back(current);
                current.clear();
            }
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) {
        words.push_back(current);
    }
    return words;
}

}  // namespace shgvqa
