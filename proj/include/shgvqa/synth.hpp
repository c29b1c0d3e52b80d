#pragma once

#include <cstdint>
#include <string>

#include "shgvqa/dataset.hpp"

namespace shgvqa {

// Knobs of the seeded synthetic situation-video generator. Questions are
// produced from templates whose answers are pure functions of the annotation,
// so an independent evaluator can re-derive every answer.
struct SynthSpec {
    std::int64_t episodes = 200;
    std::int64_t t_frames = 4;
    std::int64_t max_actions_per_frame = 2;    // N
    std::int64_t max_relations_per_frame = 3;  // M
    std::int64_t n_action_classes = 10;
    std::int64_t n_entities = 5;  // objects; "person" is added on top
    std::int64_t n_relation_kinds = 4;
    std::int64_t n_predicate_classes = 12;  // observed triplets
    QaMode qa_mode = QaMode::multiple_choice;
    std::int64_t choices = 4;
    std::int64_t qa_per_episode = 3;
    std::int64_t feature_d_x = 32;
    std::int64_t grid_h = 2;
    std::int64_t grid_w = 2;
    double noise_sigma = 0.05;

    void validate() const;  // ConfigError when infeasible
};

// Named presets for the CLI ("toy", "micro").
SynthSpec synth_preset(const std::string& name);

Dataset synth_generate(std::uint64_t seed, const SynthSpec& spec);

// Question templates:
//   action_at:      "which action occurs in frame <t>"
//   relation_at:    "which relation occurs in frame <t>"
//   action_after:   "which action occurs after <a>"   (frames after a's last)
//   relation_while: "which relation occurs while <a>"
//   action_count:   "how many actions occur in frame <t>"    (open-ended)
//   relation_count: "how many relations occur in frame <t>"  (open-ended)

}  // namespace shgvqa
