#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace shgvqa {

enum class VocabKind { action, predicate, answer, word };

std::string vocab_kind_name(VocabKind kind);

// Ordered label<->index bijection. Action and predicate vocabularies carry a
// reserved no-class slot phi at index size() (never stored in annotations;
// applied when padding ground-truth sets at loss time).
class Vocabulary {
public:
    Vocabulary() = default;

    // Labels are sorted lexicographically; duplicates are rejected.
    static Vocabulary from_labels(VocabKind kind, std::vector<std::string> labels);
    static Vocabulary from_set(VocabKind kind, const std::set<std::string>& labels);

    VocabKind kind() const { return kind_; }
    std::int64_t size() const { return static_cast<std::int64_t>(labels_.size()); }
    const std::string& label(std::int64_t index) const;
    const std::vector<std::string>& labels() const { return labels_; }
    std::int64_t index(const std::string& label) const;  // VocabError on unknown label
    bool contains(const std::string& label) const;

    bool has_phi() const { return kind_ == VocabKind::action || kind_ == VocabKind::predicate; }
    std::int64_t phi_index() const;
    std::int64_t num_classes_with_phi() const { return phi_index() + 1; }

    bool operator==(const Vocabulary& other) const {
        return kind_ == other.kind_ && labels_ == other.labels_;
    }

private:
    VocabKind kind_ = VocabKind::word;
    std::vector<std::string> labels_;
    std::unordered_map<std::string, std::int64_t> index_;
};

// Subject--relation--object triplet flattened to a single predicate class.
struct PredicateTriplet {
    std::string subject;
    std::string relation;
    std::string object;

    bool operator==(const PredicateTriplet&) const = default;
    auto operator<=>(const PredicateTriplet&) const = default;
};

inline constexpr const char* kTripletSeparator = "--";

std::string flatten_triplet(const PredicateTriplet& t);   // SchemaError if a part contains "--"
PredicateTriplet unflatten_triplet(const std::string& s); // SchemaError unless exactly 3 parts

// Lowercase whitespace tokenization.
std::vector<std::string> tokenize_words(const std::string& text);

inline constexpr const char* kClsToken = "[cls]";
inline constexpr const char* kSepToken = "[sep]";
inline constexpr const char* kUnkToken = "<unk>";

}  // namespace shgvqa
