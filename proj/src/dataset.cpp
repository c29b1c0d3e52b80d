#include "shgvqa/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "shgvqa/errors.hpp"
#include "shgvqa/rng.hpp"

namespace shgvqa {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::set<std::string>& required,
                  const std::set<std::string>& optional, const std::string& where) {
    if (!obj.is_object()) {
        throw SchemaError(where + ": expected a JSON object");
    }
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!required.count(key) && !optional.count(key)) {
            throw SchemaError(where + ": unknown field '" + key + "'");
        }
    }
    for (const std::string& key : required) {
        if (!obj.contains(key)) {
            throw SchemaError(where + ": missing field '" + key + "'");
        }
    }
}

std::vector<std::string> string_list(const json& arr, const std::string& where) {
    if (!arr.is_array()) {
        throw SchemaError(where + ": expected an array of strings");
    }
    std::vector<std::string> out;
    out.reserve(arr.size());
    for (const auto& v : arr) {
        if (!v.is_string()) {
            throw SchemaError(where + ": expected an array of strings");
        }
        out.push_back(v.get<std::string>());
    }
    return out;
}

std::vector<std::vector<std::int64_t>> frame_sets(const json& arr, const Vocabulary& vocab,
                                                  const std::string& where) {
    if (!arr.is_array()) {
        throw SchemaError(where + ": expected per-frame arrays");
    }
    std::vector<std::vector<std::int64_t>> out;
    out.reserve(arr.size());
    for (const auto& frame : arr) {
        if (!frame.is_array()) {
            throw SchemaError(where + ": expected per-frame arrays");
        }
        std::vector<std::int64_t> classes;
        classes.reserve(frame.size());
        for (const auto& v : frame) {
            if (!v.is_number_integer()) {
                throw SchemaError(where + ": class indices must be integers");
            }
            const std::int64_t c = v.get<std::int64_t>();
            if (c < 0 || c >= vocab.size()) {
                throw VocabError("unknown " + vocab_kind_name(vocab.kind()) + " class index " +
                                 std::to_string(c) + " in " + where + " (vocabulary has " +
                                 std::to_string(vocab.size()) + " labels)");
            }
            classes.push_back(c);
        }
        std::vector<std::int64_t> sorted = classes;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw SchemaError(where + ": duplicate class within a frame set");
        }
        out.push_back(std::move(sorted));
    }
    return out;
}

ClipFeatures parse_features(const json& obj, const std::string& where) {
    ClipFeatures feat;
    if (obj.contains("inline")) {
        require_keys(obj, {"inline", "h", "w"}, {}, where);
        feat.is_inline = true;
        feat.grid_h = obj.at("h").get<std::int64_t>();
        feat.grid_w = obj.at("w").get<std::int64_t>();
        const json& cube = obj.at("inline");
        if (!cube.is_array() || cube.empty()) {
            throw SchemaError(where + ": inline features must be a non-empty [T][h*w][d_x] array");
        }
        const std::int64_t t = static_cast<std::int64_t>(cube.size());
        const std::int64_t cells = static_cast<std::int64_t>(cube.at(0).size());
        if (cells != feat.grid_h * feat.grid_w) {
            throw SchemaError(where + ": inline cell count " + std::to_string(cells) +
                              " does not match h*w");
        }
        const std::int64_t dx = static_cast<std::int64_t>(cube.at(0).at(0).size());
        feat.d_x = dx;
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(t * cells * dx));
        for (const auto& frame : cube) {
            if (static_cast<std::int64_t>(frame.size()) != cells) {
                throw SchemaError(where + ": ragged inline feature frame");
            }
            for (const auto& cell : frame) {
                if (static_cast<std::int64_t>(cell.size()) != dx) {
                    throw SchemaError(where + ": ragged inline feature cell");
                }
                for (const auto& v : cell) {
                    if (!v.is_number()) {
                        throw SchemaError(where + ": inline features must be numeric");
                    }
                    const double x = v.get<double>();
                    if (!std::isfinite(x)) {
                        throw SchemaError(where + ": non-finite feature value");
                    }
                    data.push_back(x);
                }
            }
        }
        feat.inline_features = Tensor::from_data({t, cells, dx}, std::move(data), false);
    } else {
        require_keys(obj, {"codebook_seed", "h", "w", "d_x", "sigma"}, {}, where);
        feat.is_inline = false;
        feat.codebook_seed = obj.at("codebook_seed").get<std::uint64_t>();
        feat.grid_h = obj.at("h").get<std::int64_t>();
        feat.grid_w = obj.at("w").get<std::int64_t>();
        feat.d_x = obj.at("d_x").get<std::int64_t>();
        feat.sigma = obj.at("sigma").get<double>();
        if (feat.sigma < 0.0) {
            throw SchemaError(where + ": sigma must be non-negative");
        }
    }
    if (feat.grid_h < 1 || feat.grid_w < 1 || feat.d_x < 1) {
        throw SchemaError(where + ": feature dimensions must be positive");
    }
    return feat;
}

}  // namespace

const Clip& Dataset::clip_by_id(const std::string& clip_id) const {
    for (const Clip& clip : clips) {
        if (clip.annotation.clip_id == clip_id) {
            return clip;
        }
    }
    throw ValidationError("unknown clip_id '" + clip_id + "'");
}

std::map<std::string, std::size_t> Dataset::clip_index() const {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        index.emplace(clips[i].annotation.clip_id, i);
    }
    return index;
}

Dataset parse_dataset_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("dataset is not valid JSON: ") + e.what());
    }
    require_keys(root, {"vocab", "clips", "qa"}, {}, "dataset");

    const json& vocab = root.at("vocab");
    require_keys(vocab, {"actions", "predicates", "answers", "words"}, {}, "vocab");
    Dataset ds;
    ds.vocab.actions = Vocabulary::from_labels(VocabKind::action,
                                               string_list(vocab.at("actions"), "vocab.actions"));
    std::vector<std::string> predicate_labels =
        string_list(vocab.at("predicates"), "vocab.predicates");
    for (const std::string& label : predicate_labels) {
        unflatten_triplet(label);  // must parse as subject--relation--object
    }
    ds.vocab.predicates = Vocabulary::from_labels(VocabKind::predicate, std::move(predicate_labels));
    ds.vocab.answers =
        Vocabulary::from_labels(VocabKind::answer, string_list(vocab.at("answers"), "vocab.answers"));
    ds.vocab.words =
        Vocabulary::from_labels(VocabKind::word, string_list(vocab.at("words"), "vocab.words"));

    std::set<std::string> seen_clips;
    for (const json& cj : root.at("clips")) {
        require_keys(cj, {"clip_id", "T", "actions", "relations", "features"}, {}, "clip");
        Clip clip;
        clip.annotation.clip_id = cj.at("clip_id").get<std::string>();
        if (!seen_clips.insert(clip.annotation.clip_id).second) {
            throw SchemaError("duplicate clip_id '" + clip.annotation.clip_id + "'");
        }
        clip.annotation.t_frames = cj.at("T").get<std::int64_t>();
        if (clip.annotation.t_frames < 1) {
            throw SchemaError("clip '" + clip.annotation.clip_id + "': T must be >= 1");
        }
        const std::string where = "clip '" + clip.annotation.clip_id + "'";
        clip.annotation.actions = frame_sets(cj.at("actions"), ds.vocab.actions, where + " actions");
        clip.annotation.relations =
            frame_sets(cj.at("relations"), ds.vocab.predicates, where + " relations");
        if (static_cast<std::int64_t>(clip.annotation.actions.size()) != clip.annotation.t_frames ||
            static_cast<std::int64_t>(clip.annotation.relations.size()) != clip.annotation.t_frames) {
            throw SchemaError(where + ": per-frame arrays do not match T=" +
                              std::to_string(clip.annotation.t_frames));
        }
        clip.features = parse_features(cj.at("features"), where + " features");
        if (clip.features.is_inline &&
            clip.features.inline_features.dim(0) != clip.annotation.t_frames) {
            throw SchemaError(where + ": inline features have " +
                              std::to_string(clip.features.inline_features.dim(0)) +
                              " frames, annotation says T=" + std::to_string(clip.annotation.t_frames));
        }
        ds.clips.push_back(std::move(clip));
    }

    const auto index = ds.clip_index();
    for (const json& qj : root.at("qa")) {
        require_keys(qj, {"clip_id", "question", "mode", "answer"}, {"choices", "category"}, "qa");
        QASample qa;
        qa.clip_id = qj.at("clip_id").get<std::string>();
        if (!index.count(qa.clip_id)) {
            throw SchemaError("qa sample references unknown clip_id '" + qa.clip_id + "'");
        }
        qa.question = qj.at("question").get<std::string>();
        if (tokenize_words(qa.question).empty()) {
            throw SchemaError("qa sample for clip '" + qa.clip_id + "' has an empty question");
        }
        const std::string mode = qj.at("mode").get<std::string>();
        if (mode == "multiple_choice") {
            qa.mode = QaMode::multiple_choice;
        } else if (mode == "open_ended") {
            qa.mode = QaMode::open_ended;
        } else {
            throw SchemaError("qa sample: unknown mode '" + mode + "'");
        }
        qa.answer = qj.at("answer").get<std::int64_t>();
        if (qj.contains("category")) {
            qa.category = qj.at("category").get<std::string>();
        }
        if (qa.mode == QaMode::multiple_choice) {
            if (!qj.contains("choices")) {
                throw SchemaError("multiple_choice qa sample without choices");
            }
            qa.choices = string_list(qj.at("choices"), "qa.choices");
            if (qa.choices.size() < 2) {
                throw SchemaError("multiple_choice qa sample needs at least 2 choices");
            }
            if (qa.answer < 0 || qa.answer >= static_cast<std::int64_t>(qa.choices.size())) {
                throw SchemaError("qa sample answer index " + std::to_string(qa.answer) +
                                  " out of range for " + std::to_string(qa.choices.size()) +
                                  " choices");
            }
        } else {
            if (qj.contains("choices")) {
                throw SchemaError("open_ended qa sample must not carry choices");
            }
            if (qa.answer < 0 || qa.answer >= ds.vocab.answers.size()) {
                throw VocabError("unknown answer class index " + std::to_string(qa.answer) +
                                 " (vocabulary has " + std::to_string(ds.vocab.answers.size()) +
                                 " labels)");
            }
        }
        ds.qa.push_back(std::move(qa));
    }
    return ds;
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open dataset file '" + path + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_dataset_json(buf.str());
}

std::string dataset_to_json(const Dataset& dataset) {
    json root;
    root["vocab"]["actions"] = dataset.vocab.actions.labels();
    root["vocab"]["predicates"] = dataset.vocab.predicates.labels();
    root["vocab"]["answers"] = dataset.vocab.answers.labels();
    root["vocab"]["words"] = dataset.vocab.words.labels();

    root["clips"] = json::array();
    for (const Clip& clip : dataset.clips) {
        json cj;
        cj["clip_id"] = clip.annotation.clip_id;
        cj["T"] = clip.annotation.t_frames;
        cj["actions"] = clip.annotation.actions;
        cj["relations"] = clip.annotation.relations;
        json fj;
        if (clip.features.is_inline) {
            const Tensor& f = clip.features.inline_features;
            const std::int64_t t = f.dim(0), cells = f.dim(1), dx = f.dim(2);
            json cube = json::array();
            for (std::int64_t a = 0; a < t; ++a) {
                json frame = json::array();
                for (std::int64_t b = 0; b < cells; ++b) {
                    json cell = json::array();
                    for (std::int64_t c = 0; c < dx; ++c) {
                        cell.push_back(f.at({a, b, c}));
                    }
                    frame.push_back(std::move(cell));
                }
                cube.push_back(std::move(frame));
            }
            fj["inline"] = std::move(cube);
            fj["h"] = clip.features.grid_h;
            fj["w"] = clip.features.grid_w;
        } else {
            fj["codebook_seed"] = clip.features.codebook_seed;
            fj["h"] = clip.features.grid_h;
            fj["w"] = clip.features.grid_w;
            fj["d_x"] = clip.features.d_x;
            fj["sigma"] = clip.features.sigma;
        }
        cj["features"] = std::move(fj);
        root["clips"].push_back(std::move(cj));
    }

    root["qa"] = json::array();
    for (const QASample& qa : dataset.qa) {
        json qj;
        qj["clip_id"] = qa.clip_id;
        qj["question"] = qa.question;
        qj["mode"] = qa.mode == QaMode::multiple_choice ? "multiple_choice" : "open_ended";
        if (qa.mode == QaMode::multiple_choice) {
            qj["choices"] = qa.choices;
        }
        qj["answer"] = qa.answer;
        if (!qa.category.empty()) {
            qj["category"] = qa.category;
        }
        root["qa"].push_back(std::move(qj));
    }
    return root.dump(2) + "\n";
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    const std::string text = dataset_to_json(dataset);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ValidationError("cannot write dataset file '" + path + "'");
        }
        out << text;
    }
    std::rename(tmp.c_str(), path.c_str());
}

Tensor build_codebook(std::uint64_t codebook_seed, std::int64_t n_classes, std::int64_t d_x) {
    Rng rng = Rng(codebook_seed).fork("codebook");
    return Tensor::randn({n_classes, d_x}, rng, 1.0, false);
}

Tensor materialize_features(const Clip& clip, const VocabularySet& vocab) {
    const ClipFeatures& feat = clip.features;
    if (feat.is_inline) {
        return feat.inline_features;
    }
    const std::int64_t n_classes = vocab.actions.size() + vocab.predicates.size();
    const Tensor codebook = build_codebook(feat.codebook_seed, n_classes, feat.d_x);
    const std::int64_t t = clip.annotation.t_frames;
    const std::int64_t cells = feat.grid_h * feat.grid_w;
    const std::int64_t dx = feat.d_x;
    Rng noise = Rng(mix_seed(feat.codebook_seed, hash_string(clip.annotation.clip_id))).fork("noise");

    std::vector<double> data(static_cast<std::size_t>(t * cells * dx), 0.0);
    for (std::int64_t frame = 0; frame < t; ++frame) {
        std::vector<double> base(static_cast<std::size_t>(dx), 0.0);
        for (std::int64_t a : clip.annotation.actions[static_cast<std::size_t>(frame)]) {
            for (std::int64_t c = 0; c < dx; ++c) {
                base[static_cast<std::size_t>(c)] += codebook.at({a, c});
            }
        }
        for (std::int64_t p : clip.annotation.relations[static_cast<std::size_t>(frame)]) {
            const std::int64_t row = vocab.actions.size() + p;
            for (std::int64_t c = 0; c < dx; ++c) {
                base[static_cast<std::size_t>(c)] += codebook.at({row, c});
            }
        }
        for (std::int64_t cell = 0; cell < cells; ++cell) {
            double* dst = data.data() + (frame * cells + cell) * dx;
            for (std::int64_t c = 0; c < dx; ++c) {
                dst[c] = base[static_cast<std::size_t>(c)] +
                         (feat.sigma > 0.0 ? noise.normal(0.0, feat.sigma) : 0.0);
            }
        }
    }
    return Tensor::from_data({t, cells, dx}, std::move(data), false);
}

TruncationStats truncate_to_query_budget(Dataset& dataset, std::int64_t n_action_queries,
                                         std::int64_t m_relation_queries) {
    TruncationStats stats;
    std::map<std::int64_t, std::int64_t> action_freq, relation_freq;
    for (const Clip& clip : dataset.clips) {
        for (const auto& frame : clip.annotation.actions) {
            for (std::int64_t c : frame) action_freq[c]++;
        }
        for (const auto& frame : clip.annotation.relations) {
            for (std::int64_t c : frame) relation_freq[c]++;
        }
    }
    auto truncate = [](std::vector<std::int64_t>& frame, std::int64_t budget,
                       const std::map<std::int64_t, std::int64_t>& freq) -> std::int64_t {
        if (static_cast<std::int64_t>(frame.size()) <= budget) {
            return 0;
        }
        // keep the budget highest-frequency classes; ties keep the lower index
        std::vector<std::int64_t> order = frame;
        std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            const std::int64_t fa = freq.at(a), fb = freq.at(b);
            if (fa != fb) return fa > fb;
            return a < b;
        });
        const std::int64_t dropped = static_cast<std::int64_t>(frame.size()) - budget;
        order.resize(static_cast<std::size_t>(budget));
        std::sort(order.begin(), order.end());
        frame = std::move(order);
        return dropped;
    };
    for (Clip& clip : dataset.clips) {
        for (auto& frame : clip.annotation.actions) {
            stats.actions_dropped += truncate(frame, n_action_queries, action_freq);
        }
        for (auto& frame : clip.annotation.relations) {
            stats.relations_dropped += truncate(frame, m_relation_queries, relation_freq);
        }
    }
    return stats;
}

VocabularySet build_vocabularies(const std::vector<std::string>& action_labels,
                                 const std::vector<PredicateTriplet>& observed_triplets,
                                 const std::vector<std::string>& answer_labels,
                                 const std::vector<std::string>& question_texts) {
    VocabularySet set;
    set.actions = Vocabulary::from_set(VocabKind::action,
                                       {action_labels.begin(), action_labels.end()});
    // Observed triplets only; repeated observations collapse, and distinct
    // triplets cannot collide because the separator is validated.
    std::set<std::string> flattened;
    for (const PredicateTriplet& t : observed_triplets) {
        flattened.insert(flatten_triplet(t));
    }
    set.predicates = Vocabulary::from_set(VocabKind::predicate, flattened);
    set.answers = Vocabulary::from_set(VocabKind::answer,
                                       {answer_labels.begin(), answer_labels.end()});
    std::set<std::string> words = {kClsToken, kSepToken, kUnkToken};
    for (const std::string& text : question_texts) {
        for (const std::string& w : tokenize_words(text)) {
            words.insert(w);
        }
    }
    set.words = Vocabulary::from_set(VocabKind::word, words);
    return set;
}

}  // namespace shgvqa
