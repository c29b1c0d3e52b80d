#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shgvqa/dataset.hpp"
#include "shgvqa/decoder.hpp"
#include "shgvqa/embedding.hpp"
#include "shgvqa/matching.hpp"
#include "shgvqa/transformer.hpp"

namespace shgvqa {

enum class AdapterKind { pool_halve, identity_time };
enum class CrossAttnInputs { q_hg, q_v, q_v_hg };

struct ModelConfig {
    std::int64_t width = 768;
    std::int64_t layers = 5;
    std::int64_t heads = 8;
    std::int64_t ff_hidden = 0;  // 0 -> 4 * width
    std::int64_t t_frames = 16;
    std::int64_t n_action_queries = 3;
    std::int64_t m_relation_queries = 8;
    std::int64_t d_x = 2048;
    std::int64_t grid_h = 7;
    std::int64_t grid_w = 7;
    AdapterKind adapter = AdapterKind::pool_halve;
    PositionalKind positions = PositionalKind::learned;
    std::int64_t co_layers = 2;
    CrossAttnInputs cross_inputs = CrossAttnInputs::q_hg;
    QaMode qa_mode = QaMode::multiple_choice;
    std::int64_t num_choices = 4;
    std::int64_t max_question_tokens = 64;
    double dropout = 0.1;
    double layer_norm_eps = 1e-5;
    double phi_weight = 1.0;
    MatchScope match_scope = MatchScope::frame;
    bool gt_graph = false;
    bool action_only = false;
    bool relation_only = false;
    // filled in from the dataset vocabularies
    std::int64_t n_actions = 0;
    std::int64_t n_predicates = 0;
    std::int64_t n_answers = 0;
    std::int64_t n_words = 0;

    std::int64_t effective_ff() const { return ff_hidden > 0 ? ff_hidden : 4 * width; }
    std::int64_t adapted_frames() const {
        return adapter == AdapterKind::pool_halve ? t_frames / 2 : t_frames;
    }
    std::int64_t video_token_count() const { return 1 + adapted_frames() * grid_h * grid_w; }
    void validate() const;  // ConfigError on any inconsistency
};

// "toy" scale used throughout the tests: d=16, L=2, h=2, T=4, N=2, M=3.
ModelConfig toy_model_config();

struct Sample {
    Tensor features;  // [T, h*w, d_x]
    const SituationAnnotation* annotation = nullptr;
    const QASample* qa = nullptr;
};

enum class RunMode { train, eval };

struct ForwardResult {
    Tensor answer_logits;  // rank-1: [C] or [n_answers]
    Tensor action_logits;  // [N*T, n_actions+1] when the action branch ran
    Tensor relation_logits;
    SequenceAssignments action_assign;
    SequenceAssignments relation_assign;
    bool has_action = false;
    bool has_relation = false;
    Tensor l_act, l_rel, l_vqa, total;  // scalars, train mode only
};

// Pre-computed assignments (gradient checks freeze the matching so the loss
// is smooth in the parameters).
struct FrozenMatch {
    const SequenceAssignments* action = nullptr;
    const SequenceAssignments* relation = nullptr;
};

struct CoAttentionLayer {
    LayerNormParams q_ln_attn, q_ln_ff, g_ln_attn, g_ln_ff;
    MultiHeadAttention q_attends_g, g_attends_q;
    FeedForward q_ff, g_ff;

    static CoAttentionLayer init(std::int64_t width, std::int64_t heads, std::int64_t ff_hidden,
                                 Rng& rng);
    // Parallel update: both streams read the previous layer's values.
    std::pair<Tensor, Tensor> apply(const Tensor& q_stream, const Tensor& g_stream,
                                    const AttentionMask* g_mask, const DropoutCtx& drop) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

// Question token ids: [CLS] Q ([SEP] A_i per choice in multiple-choice mode).
std::vector<std::int64_t> compose_qa(const QASample& qa, const Vocabulary& words,
                                     const ModelConfig& cfg);

class ShgVqaModel {
public:
    ShgVqaModel(ModelConfig cfg, VocabularySet vocab, Rng& init_rng);

    const ModelConfig& config() const { return cfg_; }
    const VocabularySet& vocab() const { return vocab_; }

    ForwardResult forward(const Sample& sample, RunMode mode, Rng* dropout_rng = nullptr,
                          const FrozenMatch* frozen = nullptr) const;

    // Stages exposed for tests and tools.
    Tensor adapt_features(const Tensor& features) const;  // [T,h*w,d_x] -> [T'*h*w, d]
    Tensor encode_video(const Tensor& adapted, const DropoutCtx& drop = {}) const;
    Tensor encode_question(const std::vector<std::int64_t>& token_ids,
                           const DropoutCtx& drop = {}) const;
    std::pair<Tensor, Tensor> cross_attend(const Tensor& q_seq, const Tensor& g_seq,
                                           const std::vector<std::uint8_t>& g_mask,
                                           const DropoutCtx& drop = {}) const;
    Tensor answer_logits_from(const Tensor& cls_vec, const Tensor& g_vec,
                              const DropoutCtx& drop = {}) const;

    NamedParams parameters() const;

    const HypergraphDecoder& action_decoder() const { return action_dec_; }
    const HypergraphDecoder& relation_decoder() const { return relation_dec_; }
    const HypergraphAssembler& assembler() const { return assembler_; }

private:
    struct GraphStream {
        Tensor tokens;
        std::vector<std::uint8_t> mask;
    };
    GraphStream build_graph_stream(const Sample& sample, RunMode mode, const Tensor& memory,
                                   ForwardResult& result, const DropoutCtx& drop,
                                   const FrozenMatch* frozen) const;

    ModelConfig cfg_;
    VocabularySet vocab_;

    Linear feat_proj_;
    Tensor vis_token_;
    Tensor video_pos_;
    EncoderStack video_encoder_;

    Tensor word_emb_;
    Tensor question_pos_;
    EncoderStack question_encoder_;

    HypergraphDecoder action_dec_;
    HypergraphDecoder relation_dec_;

    Tensor action_label_emb_;    // gt_graph mode only
    Tensor relation_label_emb_;  // gt_graph mode only

    HypergraphAssembler assembler_;
    std::vector<CoAttentionLayer> co_layers_;

    LayerNormParams ans_ln_;
    Linear ans_fc1_;
    Linear ans_fc2_;
};

}  // namespace shgvqa
