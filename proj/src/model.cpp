#include "shgvqa/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "shgvqa/errors.hpp"

namespace shgvqa {

void ModelConfig::validate() const {
    if (width < 1 || layers < 0 || heads < 1 || t_frames < 1) {
        throw ConfigError("model config: width, heads and T must be positive");
    }
    if (width % heads != 0) {
        throw ConfigError("model config: width " + std::to_string(width) +
                          " is not divisible by heads " + std::to_string(heads));
    }
    if (adapter == AdapterKind::pool_halve && t_frames % 2 != 0) {
        throw ConfigError("model config: temporal halving needs an even T, got " +
                          std::to_string(t_frames));
    }
    if (n_action_queries < 1 || m_relation_queries < 1) {
        throw ConfigError("model config: N and M must be >= 1");
    }
    if (qa_mode == QaMode::multiple_choice && num_choices < 2) {
        throw ConfigError("model config: multiple choice needs at least 2 answer choices");
    }
    if (qa_mode == QaMode::open_ended && n_answers < 1) {
        throw ConfigError("model config: open-ended mode needs a non-empty answer vocabulary");
    }
    if (action_only && relation_only) {
        throw ConfigError("model config: action_only and relation_only are mutually exclusive");
    }
    if (gt_graph && cross_inputs != CrossAttnInputs::q_hg) {
        throw ConfigError("model config: gt_graph mode requires the Q+HG cross-attention input");
    }
    if (n_actions < 1 || n_predicates < 1 || n_words < 1) {
        throw ConfigError("model config: vocabulary sizes are unset");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("model config: dropout must be in [0,1)");
    }
    if (d_x < 1 || grid_h < 1 || grid_w < 1 || co_layers < 0 || max_question_tokens < 4) {
        throw ConfigError("model config: bad feature grid / co-attention settings");
    }
}

ModelConfig toy_model_config() {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ff_hidden = 32;
    cfg.t_frames = 4;
    cfg.n_action_queries = 2;
    cfg.m_relation_queries = 3;
    cfg.d_x = 32;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    cfg.adapter = AdapterKind::identity_time;
    cfg.co_layers = 2;
    cfg.num_choices = 4;
    cfg.max_question_tokens = 32;
    cfg.dropout = 0.0;
    return cfg;
}

CoAttentionLayer CoAttentionLayer::init(std::int64_t width, std::int64_t heads,
                                        std::int64_t ff_hidden, Rng& rng) {
    return CoAttentionLayer{LayerNormParams::init(width),
                            LayerNormParams::init(width),
                            LayerNormParams::init(width),
                            LayerNormParams::init(width),
                            MultiHeadAttention::init(width, heads, rng),
                            MultiHeadAttention::init(width, heads, rng),
                            FeedForward::init(width, ff_hidden, rng),
                            FeedForward::init(width, ff_hidden, rng)};
}

std::pair<Tensor, Tensor> CoAttentionLayer::apply(const Tensor& q_stream, const Tensor& g_stream,
                                                  const AttentionMask* g_mask,
                                                  const DropoutCtx& drop) const {
    // queries from self, keys/values from the other stream; both streams read
    // the previous layer's values
    Tensor q_new =
        add(q_stream, drop.apply(q_attends_g.apply(q_ln_attn.apply(q_stream), g_stream, g_stream,
                                                    g_mask)));
    Tensor g_new = add(g_stream, drop.apply(g_attends_q.apply(g_ln_attn.apply(g_stream), q_stream,
                                                              q_stream, nullptr)));
    q_new = add(q_new, drop.apply(q_ff.apply(q_ln_ff.apply(q_new))));
    g_new = add(g_new, drop.apply(g_ff.apply(g_ln_ff.apply(g_new))));
    return {q_new, g_new};
}

void CoAttentionLayer::collect(const std::string& prefix, NamedParams& out) const {
    q_ln_attn.collect(prefix + ".q_ln_attn", out);
    q_attends_g.collect(prefix + ".q_attends_g", out);
    q_ln_ff.collect(prefix + ".q_ln_ff", out);
    q_ff.collect(prefix + ".q_ff", out);
    g_ln_attn.collect(prefix + ".g_ln_attn", out);
    g_attends_q.collect(prefix + ".g_attends_q", out);
    g_ln_ff.collect(prefix + ".g_ln_ff", out);
    g_ff.collect(prefix + ".g_ff", out);
}

std::vector<std::int64_t> compose_qa(const QASample& qa, const Vocabulary& words,
                                     const ModelConfig& cfg) {
    const std::vector<std::string> q_words = tokenize_words(qa.question);
    if (q_words.empty()) {
        throw SchemaError("compose_qa: empty question for clip '" + qa.clip_id + "'");
    }
    auto id_of = [&](const std::string& w) {
        return words.contains(w) ? words.index(w) : words.index(kUnkToken);
    };
    std::vector<std::int64_t> ids;
    ids.push_back(words.index(kClsToken));
    for (const std::string& w : q_words) {
        ids.push_back(id_of(w));
    }
    if (cfg.qa_mode == QaMode::multiple_choice) {
        if (static_cast<std::int64_t>(qa.choices.size()) != cfg.num_choices) {
            throw ConfigError("compose_qa: sample has " + std::to_string(qa.choices.size()) +
                              " choices, model expects " + std::to_string(cfg.num_choices));
        }
        const std::int64_t sep = words.index(kSepToken);
        for (const std::string& choice : qa.choices) {
            ids.push_back(sep);
            for (const std::string& w : tokenize_words(choice)) {
                ids.push_back(id_of(w));
            }
        }
    }
    if (static_cast<std::int64_t>(ids.size()) > cfg.max_question_tokens) {
        throw ConfigError("compose_qa: sequence of " + std::to_string(ids.size()) +
                          " tokens exceeds max_question_tokens=" +
                          std::to_string(cfg.max_question_tokens));
    }
    return ids;
}

ShgVqaModel::ShgVqaModel(ModelConfig cfg, VocabularySet vocab, Rng& init_rng)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.n_actions = vocab_.actions.size();
    cfg_.n_predicates = vocab_.predicates.size();
    cfg_.n_answers = vocab_.answers.size();
    cfg_.n_words = vocab_.words.size();
    cfg_.validate();

    const std::int64_t d = cfg_.width;
    const std::int64_t ff = cfg_.effective_ff();
    feat_proj_ = Linear::init(cfg_.d_x, d, init_rng);
    vis_token_ = Tensor::randn({1, d}, init_rng, 0.02, true);
    if (cfg_.positions == PositionalKind::learned) {
        video_pos_ = position_encoding(cfg_.video_token_count(), d, PositionalKind::learned,
                                       &init_rng);
    } else {
        video_pos_ = position_encoding(cfg_.video_token_count(), d, PositionalKind::sinusoidal);
    }
    video_encoder_ = EncoderStack::init(cfg_.layers, d, cfg_.heads, ff, init_rng);

    word_emb_ = Tensor::randn({cfg_.n_words, d}, init_rng, 0.02, true);
    if (cfg_.positions == PositionalKind::learned) {
        question_pos_ = position_encoding(cfg_.max_question_tokens, d, PositionalKind::learned,
                                          &init_rng);
    } else {
        question_pos_ = position_encoding(cfg_.max_question_tokens, d, PositionalKind::sinusoidal);
    }
    question_encoder_ = EncoderStack::init(cfg_.layers, d, cfg_.heads, ff, init_rng);

    action_dec_ = HypergraphDecoder::init(QueryKind::action, cfg_.n_action_queries, cfg_.t_frames,
                                          d, cfg_.layers, cfg_.heads, ff, cfg_.n_actions, init_rng);
    relation_dec_ =
        HypergraphDecoder::init(QueryKind::relation, cfg_.m_relation_queries, cfg_.t_frames, d,
                                cfg_.layers, cfg_.heads, ff, cfg_.n_predicates, init_rng);

    if (cfg_.gt_graph) {
        action_label_emb_ = Tensor::randn({cfg_.n_actions, d}, init_rng, 0.02, true);
        relation_label_emb_ = Tensor::randn({cfg_.n_predicates, d}, init_rng, 0.02, true);
    }

    assembler_ = HypergraphAssembler::init(d, cfg_.t_frames, init_rng);
    for (std::int64_t i = 0; i < cfg_.co_layers; ++i) {
        co_layers_.push_back(CoAttentionLayer::init(d, cfg_.heads, ff, init_rng));
    }

    ans_ln_ = LayerNormParams::init(2 * d);
    ans_fc1_ = Linear::init(2 * d, d, init_rng);
    const std::int64_t out =
        cfg_.qa_mode == QaMode::multiple_choice ? cfg_.num_choices : cfg_.n_answers;
    ans_fc2_ = Linear::init(d, out, init_rng);
}

Tensor ShgVqaModel::adapt_features(const Tensor& features) const {
    if (features.rank() != 3 || features.dim(1) != cfg_.grid_h * cfg_.grid_w ||
        features.dim(2) != cfg_.d_x) {
        throw std::invalid_argument("adapt_features: expected [T," +
                                    std::to_string(cfg_.grid_h * cfg_.grid_w) + "," +
                                    std::to_string(cfg_.d_x) + "], got " +
                                    shape_str(features.shape()));
    }
    if (features.dim(0) != cfg_.t_frames) {
        throw std::invalid_argument("adapt_features: clip has " + std::to_string(features.dim(0)) +
                                    " frames, config says T=" + std::to_string(cfg_.t_frames));
    }
    const std::int64_t cells = cfg_.grid_h * cfg_.grid_w;
    Tensor flat = reshape(features, {cfg_.t_frames * cells, cfg_.d_x});
    if (cfg_.adapter == AdapterKind::pool_halve) {
        // temporal average pooling, window 2 stride 2
        std::vector<Tensor> pooled;
        for (std::int64_t t = 0; t < cfg_.t_frames / 2; ++t) {
            Tensor a = slice_rows(flat, (2 * t) * cells, cells);
            Tensor b = slice_rows(flat, (2 * t + 1) * cells, cells);
            pooled.push_back(scale(add(a, b), 0.5));
        }
        flat = concat_rows(pooled);
    }
    Tensor projected = feat_proj_.apply(flat);
    return reshape(projected, {cfg_.adapted_frames(), cells, cfg_.width});
}

Tensor ShgVqaModel::encode_video(const Tensor& adapted, const DropoutCtx& drop) const {
    const std::int64_t cells = cfg_.grid_h * cfg_.grid_w;
    Tensor tokens = reshape(adapted, {cfg_.adapted_frames() * cells, cfg_.width});
    std::vector<Tensor> parts = {vis_token_, tokens};
    Tensor seq = concat_rows(parts);
    seq = add(seq, video_pos_);
    return video_encoder_.apply(seq, nullptr, drop);
}

Tensor ShgVqaModel::encode_question(const std::vector<std::int64_t>& token_ids,
                                    const DropoutCtx& drop) const {
    Tensor emb = rows(word_emb_, token_ids);
    Tensor pos = slice_rows(question_pos_, 0, static_cast<std::int64_t>(token_ids.size()));
    return question_encoder_.apply(add(emb, pos), nullptr, drop);
}

std::pair<Tensor, Tensor> ShgVqaModel::cross_attend(const Tensor& q_seq, const Tensor& g_seq,
                                                    const std::vector<std::uint8_t>& g_mask,
                                                    const DropoutCtx& drop) const {
    const AttentionMask mask = AttentionMask::from_key_bits(g_mask, q_seq.dim(0));
    Tensor q = q_seq;
    Tensor g = g_seq;
    for (const CoAttentionLayer& layer : co_layers_) {
        auto [qn, gn] = layer.apply(q, g, &mask, drop);
        q = qn;
        g = gn;
    }
    return {q, g};
}

Tensor ShgVqaModel::answer_logits_from(const Tensor& cls_vec, const Tensor& g_vec,
                                       const DropoutCtx& drop) const {
    std::vector<Tensor> parts = {cls_vec, g_vec};
    Tensor pooled = concat_cols(parts);  // [1, 2d]
    Tensor h = gelu(ans_fc1_.apply(ans_ln_.apply(pooled)));
    Tensor logits = ans_fc2_.apply(drop.apply(h));
    return reshape(logits, {logits.dim(1)});
}

ShgVqaModel::GraphStream ShgVqaModel::build_graph_stream(const Sample& sample, RunMode mode,
                                                         const Tensor& memory,
                                                         ForwardResult& result,
                                                         const DropoutCtx& drop,
                                                         const FrozenMatch* frozen) const {
    GraphStream out;
    if (cfg_.cross_inputs == CrossAttnInputs::q_v) {
        out.tokens = memory;
        out.mask.assign(static_cast<std::size_t>(memory.dim(0)), 1);
        return out;
    }

    const std::int64_t n = cfg_.n_action_queries;
    const std::int64_t m = cfg_.m_relation_queries;
    const std::int64_t t_frames = cfg_.t_frames;
    const bool want_actions = !cfg_.relation_only;
    const bool want_relations = !cfg_.action_only;

    Tensor action_emb, relation_emb;
    std::vector<std::uint8_t> action_bits, relation_bits;
    MaskPolicy policy = mode == RunMode::train ? MaskPolicy::train : MaskPolicy::inference;

    if (cfg_.gt_graph) {
        // ground-truth label embeddings instead of decoded queries; the
        // annotation is used at evaluation time too (that is the baseline)
        if (sample.annotation == nullptr) {
            throw std::invalid_argument("gt_graph mode needs an annotation");
        }
        policy = MaskPolicy::train;  // bits reflect the real set sizes
        auto build = [&](const Tensor& table, const std::vector<std::vector<std::int64_t>>& gt,
                         std::int64_t slots, std::vector<std::uint8_t>& bits) {
            Tensor zero_pad = Tensor::zeros({1, cfg_.width});
            std::vector<Tensor> with_pad = {table, zero_pad};
            Tensor padded_table = concat_rows(with_pad);
            std::vector<std::int64_t> idx;
            for (std::int64_t t = 0; t < t_frames; ++t) {
                const auto& frame = gt[static_cast<std::size_t>(t)];
                for (std::int64_t q = 0; q < slots; ++q) {
                    if (q < static_cast<std::int64_t>(frame.size())) {
                        idx.push_back(frame[static_cast<std::size_t>(q)]);
                        bits.push_back(1);
                    } else {
                        idx.push_back(table.dim(0));  // zero pad row
                        bits.push_back(0);
                    }
                }
            }
            return rows(padded_table, idx);
        };
        if (want_actions) {
            action_emb = build(action_label_emb_, sample.annotation->actions, n, action_bits);
        }
        if (want_relations) {
            relation_emb = build(relation_label_emb_, sample.annotation->relations, m, relation_bits);
        }
    } else {
        if (want_actions) {
            DecodedQueries dq = action_dec_.decode(memory, drop);
            result.action_logits = dq.logits;
            result.has_action = true;
            action_emb = dq.embeddings;
        }
        if (want_relations) {
            DecodedQueries dq = relation_dec_.decode(memory, drop);
            result.relation_logits = dq.logits;
            result.has_relation = true;
            relation_emb = dq.embeddings;
        }
        if (mode == RunMode::train) {
            if (sample.annotation == nullptr) {
                throw std::invalid_argument("training forward needs an annotation");
            }
            auto assignments_for = [&](const Tensor& logits,
                                       const std::vector<std::vector<std::int64_t>>& gt,
                                       std::int64_t slots, std::int64_t phi,
                                       const SequenceAssignments* frozen_assign) {
                if (frozen_assign != nullptr) {
                    return *frozen_assign;
                }
                autograd::NoGradGuard ng;
                Tensor probs = softmax(logits, 1);
                return match_sequence(probs, gt, slots, phi, cfg_.match_scope);
            };
            if (want_actions) {
                result.action_assign = assignments_for(
                    result.action_logits, sample.annotation->actions, n, cfg_.n_actions,
                    frozen != nullptr ? frozen->action : nullptr);
                for (std::int64_t cls : result.action_assign.matched_class_per_slot) {
                    action_bits.push_back(cls != cfg_.n_actions ? 1 : 0);
                }
            }
            if (want_relations) {
                result.relation_assign = assignments_for(
                    result.relation_logits, sample.annotation->relations, m, cfg_.n_predicates,
                    frozen != nullptr ? frozen->relation : nullptr);
                for (std::int64_t cls : result.relation_assign.matched_class_per_slot) {
                    relation_bits.push_back(cls != cfg_.n_predicates ? 1 : 0);
                }
            }
        }
    }

    HyperGraphSequence seq = assembler_.assemble(
        want_actions ? &action_emb : nullptr, want_relations ? &relation_emb : nullptr, n, m,
        t_frames, policy, action_bits.empty() ? nullptr : &action_bits,
        relation_bits.empty() ? nullptr : &relation_bits);

    if (cfg_.cross_inputs == CrossAttnInputs::q_v_hg) {
        std::vector<Tensor> parts = {seq.tokens, memory};
        out.tokens = concat_rows(parts);
        out.mask = seq.mask;
        out.mask.insert(out.mask.end(), static_cast<std::size_t>(memory.dim(0)), 1);
    } else {
        out.tokens = seq.tokens;
        out.mask = seq.mask;
    }
    return out;
}

ForwardResult ShgVqaModel::forward(const Sample& sample, RunMode mode, Rng* dropout_rng,
                                   const FrozenMatch* frozen) const {
    std::optional<autograd::NoGradGuard> guard;
    if (mode == RunMode::eval) {
        guard.emplace();
    }
    if (sample.qa == nullptr) {
        throw std::invalid_argument("forward: sample has no QA");
    }
    DropoutCtx drop;
    if (mode == RunMode::train && dropout_rng != nullptr && cfg_.dropout > 0.0) {
        drop = DropoutCtx{cfg_.dropout, dropout_rng};
    }

    ForwardResult result;
    Tensor adapted = adapt_features(sample.features);
    Tensor memory = encode_video(adapted, drop);

    GraphStream graph = build_graph_stream(sample, mode, memory, result, drop, frozen);

    std::vector<std::int64_t> ids = compose_qa(*sample.qa, vocab_.words, cfg_);
    Tensor q_enc = encode_question(ids, drop);

    auto [q_out, g_out] = cross_attend(q_enc, graph.tokens, graph.mask, drop);
    Tensor cls_vec = slice_rows(q_out, 0, 1);
    Tensor g_vec = slice_rows(g_out, 0, 1);
    result.answer_logits = answer_logits_from(cls_vec, g_vec, drop);

    if (mode == RunMode::train) {
        result.l_act = result.has_action && result.action_assign.queries_per_frame > 0
                           ? hungarian_loss(result.action_logits, result.action_assign,
                                            cfg_.n_actions, cfg_.phi_weight)
                           : Tensor::scalar(0.0);
        result.l_rel = result.has_relation && result.relation_assign.queries_per_frame > 0
                           ? hungarian_loss(result.relation_logits, result.relation_assign,
                                            cfg_.n_predicates, cfg_.phi_weight)
                           : Tensor::scalar(0.0);
        result.l_vqa = cross_entropy(result.answer_logits, sample.qa->answer);
        result.total = total_loss(result.l_act, result.l_rel, result.l_vqa);
    }
    return result;
}

NamedParams ShgVqaModel::parameters() const {
    NamedParams out;
    feat_proj_.collect("feat_proj", out);
    out.emplace_back("vis_token", vis_token_);
    if (cfg_.positions == PositionalKind::learned) {
        out.emplace_back("video_pos", video_pos_);
    }
    video_encoder_.collect("video_encoder", out);
    out.emplace_back("word_emb", word_emb_);
    if (cfg_.positions == PositionalKind::learned) {
        out.emplace_back("question_pos", question_pos_);
    }
    question_encoder_.collect("question_encoder", out);
    action_dec_.collect("action_decoder", out);
    relation_dec_.collect("relation_decoder", out);
    if (cfg_.gt_graph) {
        out.emplace_back("action_label_emb", action_label_emb_);
        out.emplace_back("relation_label_emb", relation_label_emb_);
    }
    assembler_.collect("assembler", out);
    for (std::size_t i = 0; i < co_layers_.size(); ++i) {
        co_layers_[i].collect("co.layer" + std::to_string(i), out);
    }
    ans_ln_.collect("answer_head.ln", out);
    ans_fc1_.collect("answer_head.fc1", out);
    ans_fc2_.collect("answer_head.fc2", out);
    return out;
}

}  // namespace shgvqa
