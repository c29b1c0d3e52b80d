#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "shgvqa/errors.hpp"
#include "shgvqa/model.hpp"
#include "shgvqa/rng.hpp"
#include "shgvqa/synth.hpp"
#include "test_util.hpp"

using namespace shgvqa;
using testutil::check_gradients;

namespace {

// Hand-built toy world: 10 actions, 12 predicates, 8 answers.
VocabularySet toy_vocab() {
    std::vector<std::string> actions;
    for (int i = 0; i < 10; ++i) actions.push_back("act0" + std::to_string(i));
    std::vector<PredicateTriplet> triplets;
    for (int i = 0; i < 12; ++i) {
        triplets.push_back({"person", "rel" + std::to_string(i % 4), "obj" + std::to_string(i % 6)});
    }
    std::vector<std::string> answers;
    for (int i = 0; i < 8; ++i) answers.push_back("ans" + std::to_string(i));
    std::vector<std::string> texts = {
        "which action occurs in frame 0", "which action occurs in frame 1",
        "which action occurs in frame 2", "which relation occurs in frame 3"};
    for (const std::string& a : actions) texts.push_back(a);
    return build_vocabularies(actions, triplets, answers, texts);
}

SituationAnnotation toy_annotation() {
    SituationAnnotation ann;
    ann.clip_id = "toy_clip";
    ann.t_frames = 4;
    ann.actions = {{0, 3}, {3}, {1}, {2, 5}};
    ann.relations = {{0}, {1, 4}, {2}, {7}};
    return ann;
}

QASample toy_question() {
    QASample qa;
    qa.clip_id = "toy_clip";
    qa.question = "which action occurs in frame 1";
    qa.mode = QaMode::multiple_choice;
    qa.choices = {"act01", "act03", "act07", "act08"};
    qa.answer = 1;
    qa.category = "action_at";
    return qa;
}

struct ToyWorld {
    ModelConfig cfg;
    VocabularySet vocab;
    ShgVqaModel model;
    SituationAnnotation ann;
    QASample qa;
    Tensor features;

    Sample sample() const { return Sample{features, &ann, &qa}; }
};

ToyWorld make_toy(std::uint64_t seed = 11, ModelConfig cfg = toy_model_config()) {
    VocabularySet vocab = toy_vocab();
    Rng init(seed);
    ShgVqaModel model(cfg, vocab, init);
    Rng frng(seed + 1);
    Tensor features = Tensor::randn({cfg.t_frames, cfg.grid_h * cfg.grid_w, cfg.d_x}, frng, 1.0);
    return ToyWorld{model.config(), vocab, std::move(model), toy_annotation(), toy_question(),
                    features};
}

}  // namespace

TEST_CASE("compose_qa layouts") {
    VocabularySet vocab = toy_vocab();
    ModelConfig cfg = toy_model_config();
    QASample qa = toy_question();

    auto ids = compose_qa(qa, vocab.words, cfg);
    // [CLS] + 6 question words + 4 * ([SEP] + 1 label token)
    CHECK(ids.size() == 1 + 6 + 4 * 2);
    CHECK(ids[0] == vocab.words.index(kClsToken));
    CHECK(ids[7] == vocab.words.index(kSepToken));
    CHECK(ids[8] == vocab.words.index("act01"));

    SUBCASE("open-ended keeps only the question") {
        ModelConfig oe = cfg;
        oe.qa_mode = QaMode::open_ended;
        QASample sample = qa;
        sample.mode = QaMode::open_ended;
        sample.choices.clear();
        sample.answer = 0;
        auto open_ids = compose_qa(sample, vocab.words, oe);
        CHECK(open_ids.size() == 7);
    }
    SUBCASE("unknown words map to <unk>") {
        QASample sample = qa;
        sample.question = "which zorgblat occurs in frame 1";
        auto unk_ids = compose_qa(sample, vocab.words, cfg);
        CHECK(unk_ids[2] == vocab.words.index(kUnkToken));
    }
    SUBCASE("empty question is a schema error") {
        QASample sample = qa;
        sample.question = "   ";
        CHECK_THROWS_AS(compose_qa(sample, vocab.words, cfg), SchemaError);
    }
    SUBCASE("choice count mismatch is a config error") {
        QASample sample = qa;
        sample.choices.pop_back();
        CHECK_THROWS_AS(compose_qa(sample, vocab.words, cfg), ConfigError);
    }
}

TEST_CASE("zero-choice multiple-choice config is rejected") {
    ModelConfig cfg = toy_model_config();
    cfg.num_choices = 0;
    VocabularySet vocab = toy_vocab();
    Rng rng(3);
    CHECK_THROWS_AS(ShgVqaModel(cfg, vocab, rng), ConfigError);
}

TEST_CASE("adapter shapes and pooling") {
    ToyWorld w = make_toy();
    Tensor adapted = w.model.adapt_features(w.features);
    CHECK(adapted.shape() == Shape{4, 4, 16});  // identity-time adapter keeps T

    SUBCASE("pool_halve halves T and averages pairs") {
        ModelConfig cfg = toy_model_config();
        cfg.adapter = AdapterKind::pool_halve;
        ToyWorld wp = make_toy(13, cfg);
        // constant-in-time input: pooled output equals the per-frame map
        std::vector<double> data(wp.features.size());
        for (std::int64_t t = 0; t < 4; ++t) {
            for (std::int64_t i = 0; i < 4 * 32; ++i) {
                data[static_cast<std::size_t>(t * 4 * 32 + i)] = 0.01 * static_cast<double>(i);
            }
        }
        Tensor constant = Tensor::from_data({4, 4, 32}, data);
        Tensor pooled = wp.model.adapt_features(constant);
        CHECK(pooled.shape() == Shape{2, 4, 16});
        Tensor single = wp.model.adapt_features(constant);  // deterministic
        for (std::int64_t i = 0; i < pooled.size(); ++i) {
            CHECK(pooled.data()[static_cast<std::size_t>(i)] ==
                  single.data()[static_cast<std::size_t>(i)]);
        }
        // frames within a pooled pair were identical, so pooling = projection
        for (std::int64_t cell = 0; cell < 4; ++cell) {
            for (std::int64_t c = 0; c < 16; ++c) {
                CHECK(pooled.at({0, cell, c}) == doctest::Approx(pooled.at({1, cell, c})).epsilon(1e-12));
            }
        }
    }
    SUBCASE("odd T with halving is a config error") {
        ModelConfig cfg = toy_model_config();
        cfg.adapter = AdapterKind::pool_halve;
        cfg.t_frames = 5;
        VocabularySet vocab = toy_vocab();
        Rng rng(5);
        CHECK_THROWS_AS(ShgVqaModel(cfg, vocab, rng), ConfigError);
    }
}

TEST_CASE("encode_video token count on toy shapes") {
    ToyWorld w = make_toy();
    Tensor adapted = w.model.adapt_features(w.features);
    Tensor memory = w.model.encode_video(adapted);
    CHECK(memory.shape() == Shape{1 + 4 * 4, 16});
    for (double v : memory.data()) CHECK(std::isfinite(v));
    autograd::clear_tape();
}

TEST_CASE("encode_question is total on unk-only input") {
    ToyWorld w = make_toy();
    std::vector<std::int64_t> ids = {w.vocab.words.index(kClsToken),
                                     w.vocab.words.index(kUnkToken),
                                     w.vocab.words.index(kUnkToken)};
    Tensor out = w.model.encode_question(ids);
    CHECK(out.shape() == Shape{3, 16});
    for (double v : out.data()) CHECK(std::isfinite(v));
    autograd::clear_tape();
}

TEST_CASE("cross_attend: question stream sees only unmasked graph tokens") {
    ToyWorld w = make_toy();
    Rng rng(17);
    Tensor q = Tensor::randn({5, 16}, rng);
    Tensor g1 = Tensor::randn({7, 16}, rng);
    std::vector<std::uint8_t> bits(7, 0);
    bits[0] = 1;  // only [HG] visible
    // swap all masked rows for garbage: question-side outputs must not move
    std::vector<double> poked(g1.data().begin(), g1.data().end());
    for (std::size_t i = 16; i < poked.size(); ++i) poked[i] = 123.0 + static_cast<double>(i);
    Tensor g2 = Tensor::from_data({7, 16}, poked);

    auto [q1_out, g1_out] = w.model.cross_attend(q, g1, bits);
    auto [q2_out, g2_out] = w.model.cross_attend(q, g2, bits);
    for (std::int64_t i = 0; i < q1_out.size(); ++i) {
        CHECK(q1_out.data()[static_cast<std::size_t>(i)] ==
              q2_out.data()[static_cast<std::size_t>(i)]);
    }
    // stream shapes preserved
    CHECK(q1_out.shape() == Shape{5, 16});
    CHECK(g1_out.shape() == Shape{7, 16});
    CHECK(g2_out.shape() == Shape{7, 16});
    autograd::clear_tape();
}

TEST_CASE("cross_attend zero-leak: masked graph tokens get exactly zero gradient") {
    ToyWorld w = make_toy();
    Rng rng(19);
    Tensor q = Tensor::randn({4, 16}, rng, 1.0, false);
    Tensor g = Tensor::randn({6, 16}, rng, 1.0, true);
    std::vector<std::uint8_t> bits = {1, 1, 0, 1, 0, 1};
    g.zero_grad();
    auto [q_out, g_out] = w.model.cross_attend(q, g, bits);
    // the pooled pair reads question row 0 and graph row 0 only
    Tensor pooled_probe = add(sum(slice_rows(q_out, 0, 4)), sum(slice_rows(g_out, 0, 1)));
    autograd::backward(pooled_probe);
    for (std::size_t row = 0; row < bits.size(); ++row) {
        if (bits[row] != 0) continue;
        for (std::int64_t c = 0; c < 16; ++c) {
            CHECK(g.grad()[row * 16 + static_cast<std::size_t>(c)] == 0.0);
        }
    }
}

TEST_CASE("answer head: sizes, uniform start, gradient reach") {
    ToyWorld w = make_toy();
    Sample sample = w.sample();

    ForwardResult eval_result = w.model.forward(sample, RunMode::eval);
    CHECK(eval_result.answer_logits.shape() == Shape{4});

    // zero answer head => uniform prediction, vqa loss = log C
    ToyWorld wz = make_toy(23);
    NamedParams params = wz.model.parameters();
    for (auto& [name, tensor] : params) {
        if (name.rfind("answer_head.fc", 0) == 0) {
            std::fill(tensor.raw_data().begin(), tensor.raw_data().end(), 0.0);
        }
    }
    ForwardResult r = wz.model.forward(wz.sample(), RunMode::train);
    for (double v : r.answer_logits.data()) CHECK(v == 0.0);
    CHECK(r.l_vqa.item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    autograd::clear_tape();

    // gradient reaches the word embedding table from the vqa loss alone
    ToyWorld wg = make_toy(29);
    NamedParams gp = wg.model.parameters();
    for (auto& [name, tensor] : gp) tensor.zero_grad();
    ForwardResult rg = wg.model.forward(wg.sample(), RunMode::train);
    autograd::backward(rg.l_vqa);
    bool any = false;
    for (auto& [name, tensor] : gp) {
        if (name == "word_emb") {
            for (double v : tensor.grad()) any = any || v != 0.0;
        }
    }
    CHECK(any);
}

TEST_CASE("forward: losses finite and positive at init") {
    ToyWorld w = make_toy();
    ForwardResult r = w.model.forward(w.sample(), RunMode::train);
    for (const Tensor* t : {&r.l_act, &r.l_rel, &r.l_vqa, &r.total}) {
        CHECK(std::isfinite(t->item()));
        CHECK(t->item() > 0.0);
    }
    CHECK(r.total.item() ==
          doctest::Approx(r.l_act.item() + r.l_rel.item() + r.l_vqa.item()).epsilon(1e-12));
    autograd::clear_tape();
}

TEST_CASE("eval forward ignores the annotation entirely") {
    ToyWorld w = make_toy();
    ForwardResult clean = w.model.forward(w.sample(), RunMode::eval);

    SituationAnnotation garbage = w.ann;
    garbage.actions = {{9}, {8}, {7}, {6}};
    garbage.relations = {{11}, {10}, {9}, {8}};
    Sample poked{w.features, &garbage, &w.qa};
    ForwardResult dirty = w.model.forward(poked, RunMode::eval);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(clean.answer_logits.data()[static_cast<std::size_t>(i)] ==
              dirty.answer_logits.data()[static_cast<std::size_t>(i)]);
    }

    Sample none{w.features, nullptr, &w.qa};
    ForwardResult missing = w.model.forward(none, RunMode::eval);
    CHECK(missing.answer_logits.data()[0] == clean.answer_logits.data()[0]);
}

TEST_CASE("train mask policy differs from inference policy") {
    ToyWorld w = make_toy();
    ForwardResult train_r = w.model.forward(w.sample(), RunMode::train);
    // some slots must be matched to phi (2 queries/frame vs 1-2 labels, 3 relation queries)
    bool any_phi = false;
    for (std::int64_t cls : train_r.relation_assign.matched_class_per_slot) {
        any_phi = any_phi || cls == w.cfg.n_predicates;
    }
    CHECK(any_phi);
    autograd::clear_tape();
}

TEST_CASE("gt_graph mode reads labels, not decoders") {
    ModelConfig cfg = toy_model_config();
    cfg.gt_graph = true;
    ToyWorld w = make_toy(31, cfg);
    ForwardResult r = w.model.forward(w.sample(), RunMode::train);
    CHECK(!r.has_action);
    CHECK(!r.has_relation);
    CHECK(r.l_act.item() == 0.0);
    CHECK(r.l_rel.item() == 0.0);
    CHECK(r.l_vqa.item() > 0.0);
    autograd::clear_tape();

    // changing the annotation changes the logits (band: gt mode uses it at eval)
    ForwardResult base = w.model.forward(w.sample(), RunMode::eval);
    SituationAnnotation other = w.ann;
    other.actions[1] = {7};
    Sample poked{w.features, &other, &w.qa};
    ForwardResult moved = w.model.forward(poked, RunMode::eval);
    bool any_diff = false;
    for (std::int64_t i = 0; i < 4; ++i) {
        any_diff = any_diff || base.answer_logits.data()[static_cast<std::size_t>(i)] !=
                                   moved.answer_logits.data()[static_cast<std::size_t>(i)];
    }
    CHECK(any_diff);
}

TEST_CASE("ablation flags: action_only zeroes relation-decoder gradients") {
    ModelConfig cfg = toy_model_config();
    cfg.action_only = true;
    ToyWorld w = make_toy(37, cfg);
    NamedParams params = w.model.parameters();
    for (auto& [name, tensor] : params) tensor.zero_grad();
    ForwardResult r = w.model.forward(w.sample(), RunMode::train);
    CHECK(r.l_rel.item() == 0.0);
    CHECK(!r.has_relation);
    autograd::backward(r.total);
    bool action_grads = false;
    for (auto& [name, tensor] : params) {
        const bool is_relation = name.rfind("relation_decoder", 0) == 0;
        bool nonzero = false;
        if (tensor.has_grad()) {
            for (double v : tensor.grad()) nonzero = nonzero || v != 0.0;
        }
        if (is_relation) {
            CHECK(!nonzero);
        }
        if (name.rfind("action_decoder", 0) == 0) {
            action_grads = action_grads || nonzero;
        }
    }
    CHECK(action_grads);
}

TEST_CASE("q_v mode feeds video tokens and drops graph losses") {
    ModelConfig cfg = toy_model_config();
    cfg.cross_inputs = CrossAttnInputs::q_v;
    ToyWorld w = make_toy(41, cfg);
    ForwardResult r = w.model.forward(w.sample(), RunMode::train);
    CHECK(r.l_act.item() == 0.0);
    CHECK(r.l_rel.item() == 0.0);
    CHECK(r.l_vqa.item() > 0.0);
    CHECK(!r.has_action);
    autograd::clear_tape();

    ModelConfig cfg2 = toy_model_config();
    cfg2.cross_inputs = CrossAttnInputs::q_v_hg;
    ToyWorld w2 = make_toy(41, cfg2);
    ForwardResult r2 = w2.model.forward(w2.sample(), RunMode::train);
    CHECK(r2.has_action);
    CHECK(r2.l_act.item() > 0.0);
    autograd::clear_tape();
}

TEST_CASE("multiple-choice and open-ended share every weight but the answer head") {
    VocabularySet vocab = toy_vocab();
    ModelConfig mc_cfg = toy_model_config();
    ModelConfig oe_cfg = toy_model_config();
    oe_cfg.qa_mode = QaMode::open_ended;
    Rng r1(43), r2(43);
    ShgVqaModel mc(mc_cfg, vocab, r1);
    ShgVqaModel oe(oe_cfg, vocab, r2);
    NamedParams pa = mc.parameters();
    NamedParams pb = oe.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        if (pa[i].first.rfind("answer_head.fc2", 0) == 0) {
            continue;  // C logits vs answer-vocabulary logits
        }
        CHECK(pa[i].second.shape() == pb[i].second.shape());
    }
    CHECK(pa.size() > 40);
}

TEST_CASE("end-to-end gradient check on the toy config (sampled coordinates)") {
    ToyWorld w = make_toy(47);
    Sample sample = w.sample();
    // freeze the matching so the loss is smooth
    ForwardResult first = w.model.forward(sample, RunMode::train);
    SequenceAssignments act = first.action_assign;
    SequenceAssignments rel = first.relation_assign;
    autograd::clear_tape();
    FrozenMatch frozen{&act, &rel};

    NamedParams params = w.model.parameters();
    Rng coords(123);
    auto res = check_gradients(
        params, [&] { return w.model.forward(sample, RunMode::train, nullptr, &frozen).total; },
        1e-5, 1e-5, 4, &coords);
    CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("same seed gives identical models and forwards") {
    ToyWorld a = make_toy(51);
    ToyWorld b = make_toy(51);
    ForwardResult ra = a.model.forward(a.sample(), RunMode::eval);
    ForwardResult rb = b.model.forward(b.sample(), RunMode::eval);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(ra.answer_logits.data()[static_cast<std::size_t>(i)] ==
              rb.answer_logits.data()[static_cast<std::size_t>(i)]);
    }
}
