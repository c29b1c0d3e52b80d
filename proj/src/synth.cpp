#include "shgvqa/synth.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "shgvqa/errors.hpp"
#include "shgvqa/rng.hpp"

namespace shgvqa {

namespace {

std::string padded(std::int64_t value, int width) {
    std::ostringstream os;
    os << value;
    std::string s = os.str();
    while (static_cast<int>(s.size()) < width) {
        s.insert(s.begin(), '0');
    }
    return s;
}

struct LabelSpace {
    std::vector<std::string> action_labels;
    std::vector<std::string> predicate_labels;  // flattened, sorted after vocab build
};

std::vector<PredicateTriplet> sample_triplets(Rng& rng, const SynthSpec& spec) {
    std::vector<std::string> entities;
    entities.push_back("person");
    for (std::int64_t i = 0; i < spec.n_entities; ++i) {
        entities.push_back("obj" + padded(i, 2));
    }
    std::vector<std::string> relations;
    for (std::int64_t i = 0; i < spec.n_relation_kinds; ++i) {
        relations.push_back("rel" + padded(i, 2));
    }
    std::set<PredicateTriplet> seen;
    std::vector<PredicateTriplet> out;
    std::int64_t guard = 0;
    while (static_cast<std::int64_t>(out.size()) < spec.n_predicate_classes) {
        if (++guard > spec.n_predicate_classes * 1000) {
            throw ConfigError("synth spec: cannot sample enough distinct predicate triplets");
        }
        PredicateTriplet t;
        t.subject = entities[static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(entities.size())))];
        t.relation = relations[static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(relations.size())))];
        t.object = entities[static_cast<std::size_t>(
            1 + rng.uniform_int(static_cast<std::int64_t>(entities.size()) - 1))];
        if (t.object == t.subject) {
            continue;
        }
        if (seen.insert(t).second) {
            out.push_back(t);
        }
    }
    return out;
}

// Action timelines: spans of random duration keep a frame's active set between
// 1 and N actions, mirroring hyper-edges that persist across frames.
std::vector<std::vector<std::int64_t>> sample_action_timeline(Rng& rng, const SynthSpec& spec) {
    struct Active {
        std::int64_t cls;
        std::int64_t remaining;
    };
    std::vector<Active> active;
    auto has = [&](std::int64_t cls) {
        for (const Active& a : active) {
            if (a.cls == cls) return true;
        }
        return false;
    };
    auto add_new = [&](std::int64_t max_duration) {
        std::int64_t cls;
        do {
            cls = rng.uniform_int(spec.n_action_classes);
        } while (has(cls));
        active.push_back({cls, 1 + rng.uniform_int(max_duration)});
    };

    std::vector<std::vector<std::int64_t>> frames;
    for (std::int64_t t = 0; t < spec.t_frames; ++t) {
        for (auto& a : active) {
            a.remaining--;
        }
        std::erase_if(active, [](const Active& a) { return a.remaining <= 0; });
        const std::int64_t want = 1 + rng.uniform_int(spec.max_actions_per_frame);
        while (static_cast<std::int64_t>(active.size()) > want) {
            // retire the span closest to expiring; ties retire the lower class
            std::size_t victim = 0;
            for (std::size_t i = 1; i < active.size(); ++i) {
                if (active[i].remaining < active[victim].remaining ||
                    (active[i].remaining == active[victim].remaining &&
                     active[i].cls < active[victim].cls)) {
                    victim = i;
                }
            }
            active.erase(active.begin() + static_cast<std::ptrdiff_t>(victim));
        }
        while (static_cast<std::int64_t>(active.size()) < want) {
            add_new(spec.t_frames - t);
        }
        std::vector<std::int64_t> frame;
        frame.reserve(active.size());
        for (const Active& a : active) {
            frame.push_back(a.cls);
        }
        std::sort(frame.begin(), frame.end());
        frames.push_back(std::move(frame));
    }
    return frames;
}

bool contains(const std::vector<std::int64_t>& sorted, std::int64_t v) {
    return std::binary_search(sorted.begin(), sorted.end(), v);
}

struct QuestionDraft {
    std::string category;
    std::string question;
    std::int64_t correct_class = -1;   // class index in its vocabulary
    bool about_actions = true;
    std::vector<std::int64_t> excluded;  // classes that must not appear as distractors
};

// Candidate (question, correct class) pairs for one template on one clip.
std::vector<QuestionDraft> template_candidates(const std::string& category,
                                               const SituationAnnotation& ann,
                                               const VocabularySet& vocab, const SynthSpec& spec) {
    std::vector<QuestionDraft> out;
    const std::int64_t t_frames = ann.t_frames;
    auto union_after = [&](std::int64_t last_frame) {
        std::set<std::int64_t> u;
        for (std::int64_t t = last_frame + 1; t < t_frames; ++t) {
            for (std::int64_t c : ann.actions[static_cast<std::size_t>(t)]) u.insert(c);
        }
        return u;
    };
    if (category == "action_at") {
        for (std::int64_t t = 0; t < t_frames; ++t) {
            for (std::int64_t c : ann.actions[static_cast<std::size_t>(t)]) {
                QuestionDraft d;
                d.category = category;
                d.question = "which action occurs in frame " + std::to_string(t);
                d.correct_class = c;
                d.about_actions = true;
                d.excluded = ann.actions[static_cast<std::size_t>(t)];
                out.push_back(std::move(d));
            }
        }
    } else if (category == "relation_at") {
        for (std::int64_t t = 0; t < t_frames; ++t) {
            for (std::int64_t c : ann.relations[static_cast<std::size_t>(t)]) {
                QuestionDraft d;
                d.category = category;
                d.question = "which relation occurs in frame " + std::to_string(t);
                d.correct_class = c;
                d.about_actions = false;
                d.excluded = ann.relations[static_cast<std::size_t>(t)];
                out.push_back(std::move(d));
            }
        }
    } else if (category == "action_after") {
        std::map<std::int64_t, std::int64_t> last_frame;
        for (std::int64_t t = 0; t < t_frames; ++t) {
            for (std::int64_t c : ann.actions[static_cast<std::size_t>(t)]) last_frame[c] = t;
        }
        for (const auto& [anchor, last] : last_frame) {
            if (last >= t_frames - 1) continue;
            const std::set<std::int64_t> after = union_after(last);
            if (after.empty()) continue;
            if (spec.n_action_classes - static_cast<std::int64_t>(after.size()) < spec.choices - 1) {
                continue;
            }
            for (std::int64_t c : after) {
                QuestionDraft d;
                d.category = category;
                d.question = "which action occurs after " + vocab.actions.label(anchor);
                d.correct_class = c;
                d.about_actions = true;
                d.excluded.assign(after.begin(), after.end());
                out.push_back(std::move(d));
            }
        }
    } else if (category == "relation_while") {
        std::set<std::int64_t> anchors;
        for (const auto& frame : ann.actions) {
            anchors.insert(frame.begin(), frame.end());
        }
        for (std::int64_t anchor : anchors) {
            std::set<std::int64_t> during;
            for (std::int64_t t = 0; t < t_frames; ++t) {
                if (contains(ann.actions[static_cast<std::size_t>(t)], anchor)) {
                    for (std::int64_t c : ann.relations[static_cast<std::size_t>(t)]) {
                        during.insert(c);
                    }
                }
            }
            if (during.empty()) continue;
            if (spec.n_predicate_classes - static_cast<std::int64_t>(during.size()) <
                spec.choices - 1) {
                continue;
            }
            for (std::int64_t c : during) {
                QuestionDraft d;
                d.category = category;
                d.question = "which relation occurs while " + vocab.actions.label(anchor);
                d.correct_class = c;
                d.about_actions = false;
                d.excluded.assign(during.begin(), during.end());
                out.push_back(std::move(d));
            }
        }
    } else if (category == "action_count" || category == "relation_count") {
        const bool actions = category == "action_count";
        for (std::int64_t t = 0; t < t_frames; ++t) {
            const auto& frame =
                actions ? ann.actions[static_cast<std::size_t>(t)] : ann.relations[static_cast<std::size_t>(t)];
            QuestionDraft d;
            d.category = category;
            d.question = std::string("how many ") + (actions ? "actions" : "relations") +
                         " occur in frame " + std::to_string(t);
            d.correct_class = static_cast<std::int64_t>(frame.size());  // count, not class
            d.about_actions = actions;
            out.push_back(std::move(d));
        }
    } else {
        throw ConfigError("unknown question template '" + category + "'");
    }
    return out;
}

}  // namespace

void SynthSpec::validate() const {
    if (episodes < 1 || t_frames < 1 || qa_per_episode < 1) {
        throw ConfigError("synth spec: episodes, T and qa_per_episode must be >= 1");
    }
    if (max_actions_per_frame < 1 || max_relations_per_frame < 1) {
        throw ConfigError("synth spec: N and M must be >= 1");
    }
    if (n_action_classes < max_actions_per_frame) {
        throw ConfigError("synth spec: action vocabulary smaller than per-frame set size");
    }
    if (n_predicate_classes < max_relations_per_frame) {
        throw ConfigError("synth spec: predicate vocabulary smaller than per-frame set size");
    }
    if (n_entities < 2 || n_relation_kinds < 1) {
        throw ConfigError("synth spec: need at least 2 entities and 1 relation kind");
    }
    const std::int64_t combos = (n_entities + 1) * n_relation_kinds * n_entities;
    if (n_predicate_classes > combos) {
        throw ConfigError("synth spec: more predicate classes than entity/relation combinations");
    }
    if (qa_mode == QaMode::multiple_choice) {
        if (choices < 2) {
            throw ConfigError("synth spec: multiple choice needs at least 2 choices");
        }
        if (n_action_classes - max_actions_per_frame < choices - 1 ||
            n_predicate_classes - max_relations_per_frame < choices - 1) {
            throw ConfigError("synth spec: vocabularies too small to sample " +
                              std::to_string(choices - 1) + " distractors");
        }
    }
    if (feature_d_x < n_action_classes + n_predicate_classes) {
        throw ConfigError(
            "synth spec: feature_d_x must be >= total class count for decodable features");
    }
    if (grid_h < 1 || grid_w < 1 || noise_sigma < 0.0) {
        throw ConfigError("synth spec: bad feature grid or noise");
    }
}

SynthSpec synth_preset(const std::string& name) {
    if (name == "toy") {
        return SynthSpec{};
    }
    if (name == "micro") {
        SynthSpec spec;
        spec.episodes = 6;
        spec.t_frames = 3;
        spec.max_actions_per_frame = 2;
        spec.max_relations_per_frame = 2;
        spec.n_action_classes = 6;
        spec.n_entities = 4;
        spec.n_relation_kinds = 3;
        spec.n_predicate_classes = 7;
        spec.qa_per_episode = 2;
        spec.feature_d_x = 16;
        spec.grid_h = 1;
        spec.grid_w = 2;
        return spec;
    }
    throw ConfigError("unknown synth preset '" + name + "'");
}

Dataset synth_generate(std::uint64_t seed, const SynthSpec& spec) {
    spec.validate();
    Rng root(seed);

    std::vector<std::string> action_labels;
    for (std::int64_t i = 0; i < spec.n_action_classes; ++i) {
        action_labels.push_back("act" + padded(i, 2));
    }
    Rng triplet_rng = root.fork("triplets");
    const std::vector<PredicateTriplet> triplets = sample_triplets(triplet_rng, spec);

    // annotations first; vocabularies and QA afterwards
    std::vector<SituationAnnotation> annotations;
    for (std::int64_t e = 0; e < spec.episodes; ++e) {
        Rng ep = root.fork(mix_seed(0x5eed, static_cast<std::uint64_t>(e)));
        SituationAnnotation ann;
        ann.clip_id = "clip_" + padded(e, 6);
        ann.t_frames = spec.t_frames;
        ann.actions = sample_action_timeline(ep, spec);
        for (std::int64_t t = 0; t < spec.t_frames; ++t) {
            const std::int64_t k = 1 + ep.uniform_int(spec.max_relations_per_frame);
            std::vector<std::int64_t> frame = ep.sample_without_replacement(spec.n_predicate_classes, k);
            std::sort(frame.begin(), frame.end());
            ann.relations.push_back(std::move(frame));
        }
        annotations.push_back(std::move(ann));
    }

    // answer labels: class labels for multiple choice, count strings open-ended
    std::vector<std::string> answer_labels;
    if (spec.qa_mode == QaMode::open_ended) {
        const std::int64_t max_count =
            std::max(spec.max_actions_per_frame, spec.max_relations_per_frame);
        for (std::int64_t c = 1; c <= max_count; ++c) {
            answer_labels.push_back(std::to_string(c));
        }
    } else {
        answer_labels = action_labels;
        for (const PredicateTriplet& t : triplets) {
            answer_labels.push_back(flatten_triplet(t));
        }
    }

    VocabularySet vocab = build_vocabularies(action_labels, triplets, answer_labels, {});

    const std::vector<std::string> mc_templates = {"action_at", "relation_at", "action_after",
                                                   "relation_while"};
    const std::vector<double> mc_weights = {0.40, 0.30, 0.15, 0.15};
    const std::vector<std::string> oe_templates = {"action_count", "relation_count"};

    std::map<std::string, std::int64_t> usage;  // correct-answer label balance
    std::vector<QASample> qa_samples;
    std::vector<std::string> texts_for_words;

    Rng qa_rng = root.fork("qa");
    for (const SituationAnnotation& ann : annotations) {
        for (std::int64_t k = 0; k < spec.qa_per_episode; ++k) {
            // weighted template pick with deterministic fallback order
            std::vector<std::string> order;
            if (spec.qa_mode == QaMode::multiple_choice) {
                double r = qa_rng.uniform();
                std::size_t first = 0;
                for (std::size_t i = 0; i < mc_weights.size(); ++i) {
                    if (r < mc_weights[i]) {
                        first = i;
                        break;
                    }
                    r -= mc_weights[i];
                }
                for (std::size_t i = 0; i < mc_templates.size(); ++i) {
                    order.push_back(mc_templates[(first + i) % mc_templates.size()]);
                }
            } else {
                const std::size_t first = static_cast<std::size_t>(qa_rng.uniform_int(2));
                order.push_back(oe_templates[first]);
                order.push_back(oe_templates[1 - first]);
            }

            bool emitted = false;
            for (const std::string& category : order) {
                auto candidates = template_candidates(category, ann, vocab, spec);
                if (candidates.empty()) continue;
                // balance correct answers: take a min-usage candidate
                std::int64_t best_usage = INT64_MAX;
                std::vector<std::size_t> best;
                for (std::size_t i = 0; i < candidates.size(); ++i) {
                    const QuestionDraft& d = candidates[i];
                    std::string label;
                    if (spec.qa_mode == QaMode::open_ended) {
                        label = std::to_string(d.correct_class);
                    } else {
                        label = d.about_actions ? vocab.actions.label(d.correct_class)
                                                : vocab.predicates.label(d.correct_class);
                    }
                    const std::int64_t u = usage.count(label) ? usage.at(label) : 0;
                    if (u < best_usage) {
                        best_usage = u;
                        best.clear();
                    }
                    if (u == best_usage) {
                        best.push_back(i);
                    }
                }
                const QuestionDraft& pick =
                    candidates[best[static_cast<std::size_t>(qa_rng.uniform_int(
                        static_cast<std::int64_t>(best.size())))]];

                QASample qa;
                qa.clip_id = ann.clip_id;
                qa.question = pick.question;
                qa.mode = spec.qa_mode;
                qa.category = pick.category;
                std::string correct_label;
                if (spec.qa_mode == QaMode::open_ended) {
                    correct_label = std::to_string(pick.correct_class);
                    qa.answer = vocab.answers.index(correct_label);
                } else {
                    const Vocabulary& kind_vocab =
                        pick.about_actions ? vocab.actions : vocab.predicates;
                    correct_label = kind_vocab.label(pick.correct_class);
                    // distractors: classes outside the excluded (satisfying) set
                    std::vector<std::int64_t> pool;
                    for (std::int64_t c = 0; c < kind_vocab.size(); ++c) {
                        if (!contains(pick.excluded, c)) {
                            pool.push_back(c);
                        }
                    }
                    qa_rng.shuffle(pool);
                    std::vector<std::string> choice_labels = {correct_label};
                    for (std::int64_t i = 0; i < spec.choices - 1; ++i) {
                        choice_labels.push_back(kind_vocab.label(pool[static_cast<std::size_t>(i)]));
                    }
                    const std::int64_t position = qa_rng.uniform_int(spec.choices);
                    std::swap(choice_labels[0], choice_labels[static_cast<std::size_t>(position)]);
                    qa.choices = choice_labels;
                    qa.answer = position;
                }
                usage[correct_label]++;
                texts_for_words.push_back(qa.question);
                for (const std::string& c : qa.choices) {
                    texts_for_words.push_back(c);
                }
                qa_samples.push_back(std::move(qa));
                emitted = true;
                break;
            }
            if (!emitted) {
                throw ConfigError("synth spec: no feasible question template for clip " +
                                  ann.clip_id);
            }
        }
    }

    // rebuild the word vocabulary now that the question texts exist
    vocab = build_vocabularies(action_labels, triplets, answer_labels, texts_for_words);

    Dataset ds;
    ds.vocab = std::move(vocab);
    const std::uint64_t codebook_seed = mix_seed(seed, hash_string("codebook"));
    for (SituationAnnotation& ann : annotations) {
        Clip clip;
        clip.annotation = std::move(ann);
        clip.features.is_inline = false;
        clip.features.codebook_seed = codebook_seed;
        clip.features.grid_h = spec.grid_h;
        clip.features.grid_w = spec.grid_w;
        clip.features.d_x = spec.feature_d_x;
        clip.features.sigma = spec.noise_sigma;
        ds.clips.push_back(std::move(clip));
    }
    ds.qa = std::move(qa_samples);
    return ds;
}

}  // namespace shgvqa
