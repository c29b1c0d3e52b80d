#include "shgvqa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "shgvqa/checkpoint.hpp"
#include "shgvqa/errors.hpp"
#include "shgvqa/optimizer.hpp"
#include "shgvqa/rng.hpp"

namespace shgvqa {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& value, const std::string& key) {
    std::istringstream is(value);
    T out;
    is >> out;
    if (is.fail() || !trim(value.substr(static_cast<std::size_t>(is.tellg()) == std::string::npos
                                            ? value.size()
                                            : static_cast<std::size_t>(is.tellg())))
                          .empty()) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
    }
    return out;
}

struct KeyTable {
    std::map<std::string, std::function<void(RunConfig&, const std::string&)>> setters;
    std::map<std::string, std::function<std::string(const RunConfig&)>> getters;
    std::vector<std::string> order;

    void add(const std::string& key, std::function<void(RunConfig&, const std::string&)> set,
             std::function<std::string(const RunConfig&)> get) {
        setters[key] = std::move(set);
        getters[key] = std::move(get);
        order.push_back(key);
    }
};

std::string adapter_name(AdapterKind kind) {
    return kind == AdapterKind::pool_halve ? "pool_halve" : "identity_time";
}
AdapterKind adapter_from(const std::string& v) {
    if (v == "pool_halve") return AdapterKind::pool_halve;
    if (v == "identity_time") return AdapterKind::identity_time;
    throw ConfigError("config: unknown adapter '" + v + "'");
}
std::string positions_name(PositionalKind kind) {
    return kind == PositionalKind::learned ? "learned" : "sinusoidal";
}
PositionalKind positions_from(const std::string& v) {
    if (v == "learned") return PositionalKind::learned;
    if (v == "sinusoidal") return PositionalKind::sinusoidal;
    throw ConfigError("config: unknown positions '" + v + "'");
}
std::string cross_name(CrossAttnInputs c) {
    switch (c) {
        case CrossAttnInputs::q_hg: return "q_hg";
        case CrossAttnInputs::q_v: return "q_v";
        case CrossAttnInputs::q_v_hg: return "q_v_hg";
    }
    return "?";
}
CrossAttnInputs cross_from(const std::string& v) {
    if (v == "q_hg") return CrossAttnInputs::q_hg;
    if (v == "q_v") return CrossAttnInputs::q_v;
    if (v == "q_v_hg") return CrossAttnInputs::q_v_hg;
    throw ConfigError("config: unknown cross_inputs '" + v + "'");
}
std::string qa_mode_name(QaMode m) {
    return m == QaMode::multiple_choice ? "multiple_choice" : "open_ended";
}
QaMode qa_mode_from(const std::string& v) {
    if (v == "multiple_choice") return QaMode::multiple_choice;
    if (v == "open_ended") return QaMode::open_ended;
    throw ConfigError("config: unknown qa_mode '" + v + "'");
}
std::string scope_name(MatchScope s) { return s == MatchScope::frame ? "frame" : "video"; }
MatchScope scope_from(const std::string& v) {
    if (v == "frame") return MatchScope::frame;
    if (v == "video") return MatchScope::video;
    throw ConfigError("config: unknown match_scope '" + v + "'");
}
std::string map_variant_name(MapVariant v) {
    switch (v) {
        case MapVariant::all_point: return "all_point";
        case MapVariant::interpolated: return "interpolated";
        case MapVariant::eleven_point: return "eleven_point";
    }
    return "?";
}
MapVariant map_variant_from(const std::string& v) {
    if (v == "all_point") return MapVariant::all_point;
    if (v == "interpolated") return MapVariant::interpolated;
    if (v == "eleven_point") return MapVariant::eleven_point;
    throw ConfigError("config: unknown map_variant '" + v + "'");
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const KeyTable& key_table() {
    static const KeyTable table = [] {
        KeyTable t;
        auto str = [](std::string RunConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) { c.*field = v; },
                [field](const RunConfig& c) { return c.*field; }};
        };
        auto i64 = [](std::int64_t RunConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) {
                    c.*field = parse_number<std::int64_t>(v, "");
                },
                [field](const RunConfig& c) { return std::to_string(c.*field); }};
        };
        auto dbl = [](double RunConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) { c.*field = parse_number<double>(v, ""); },
                [field](const RunConfig& c) { return fmt_double(c.*field); }};
        };
        auto mi64 = [](std::int64_t ModelConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) {
                    c.model.*field = parse_number<std::int64_t>(v, "");
                },
                [field](const RunConfig& c) { return std::to_string(c.model.*field); }};
        };
        auto mdbl = [](double ModelConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) {
                    c.model.*field = parse_number<double>(v, "");
                },
                [field](const RunConfig& c) { return fmt_double(c.model.*field); }};
        };
        auto mbool = [](bool ModelConfig::* field) {
            return std::pair{
                [field](RunConfig& c, const std::string& v) {
                    c.model.*field = parse_bool(v, "");
                },
                [field](const RunConfig& c) { return c.model.*field ? "true" : "false"; }};
        };

        auto add = [&t](const std::string& key, auto pair) {
            t.add(key, pair.first, pair.second);
        };
        add("train_data", str(&RunConfig::train_data));
        add("val_data", str(&RunConfig::val_data));
        add("out_dir", str(&RunConfig::out_dir));
        t.add("seed",
              [](RunConfig& c, const std::string& v) {
                  c.seed = parse_number<std::uint64_t>(v, "seed");
              },
              [](const RunConfig& c) { return std::to_string(c.seed); });

        add("width", mi64(&ModelConfig::width));
        add("layers", mi64(&ModelConfig::layers));
        add("heads", mi64(&ModelConfig::heads));
        add("ff_hidden", mi64(&ModelConfig::ff_hidden));
        add("t_frames", mi64(&ModelConfig::t_frames));
        add("n_action_queries", mi64(&ModelConfig::n_action_queries));
        add("m_relation_queries", mi64(&ModelConfig::m_relation_queries));
        add("d_x", mi64(&ModelConfig::d_x));
        add("grid_h", mi64(&ModelConfig::grid_h));
        add("grid_w", mi64(&ModelConfig::grid_w));
        t.add("adapter",
              [](RunConfig& c, const std::string& v) { c.model.adapter = adapter_from(v); },
              [](const RunConfig& c) { return adapter_name(c.model.adapter); });
        t.add("positions",
              [](RunConfig& c, const std::string& v) { c.model.positions = positions_from(v); },
              [](const RunConfig& c) { return positions_name(c.model.positions); });
        add("co_layers", mi64(&ModelConfig::co_layers));
        t.add("cross_inputs",
              [](RunConfig& c, const std::string& v) { c.model.cross_inputs = cross_from(v); },
              [](const RunConfig& c) { return cross_name(c.model.cross_inputs); });
        t.add("qa_mode",
              [](RunConfig& c, const std::string& v) { c.model.qa_mode = qa_mode_from(v); },
              [](const RunConfig& c) { return qa_mode_name(c.model.qa_mode); });
        add("num_choices", mi64(&ModelConfig::num_choices));
        add("max_question_tokens", mi64(&ModelConfig::max_question_tokens));
        add("dropout", mdbl(&ModelConfig::dropout));
        add("phi_weight", mdbl(&ModelConfig::phi_weight));
        t.add("match_scope",
              [](RunConfig& c, const std::string& v) { c.model.match_scope = scope_from(v); },
              [](const RunConfig& c) { return scope_name(c.model.match_scope); });
        add("gt_graph", mbool(&ModelConfig::gt_graph));
        add("action_only", mbool(&ModelConfig::action_only));
        add("relation_only", mbool(&ModelConfig::relation_only));

        add("lr", dbl(&RunConfig::lr));
        add("warmup_frac", dbl(&RunConfig::warmup_frac));
        add("beta1", dbl(&RunConfig::beta1));
        add("beta2", dbl(&RunConfig::beta2));
        add("adam_eps", dbl(&RunConfig::adam_eps));
        add("weight_decay", dbl(&RunConfig::weight_decay));
        add("grad_clip", dbl(&RunConfig::grad_clip));
        add("batch_size", i64(&RunConfig::batch_size));
        add("max_steps", i64(&RunConfig::max_steps));
        add("max_epochs", i64(&RunConfig::max_epochs));
        add("eval_interval", i64(&RunConfig::eval_interval));
        add("patience", i64(&RunConfig::patience));
        t.add("map_variant",
              [](RunConfig& c, const std::string& v) { c.map_variant = map_variant_from(v); },
              [](const RunConfig& c) { return map_variant_name(c.map_variant); });
        return t;
    }();
    return table;
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const KeyTable& table = key_table();
    auto it = table.setters.find(key);
    if (it == table.setters.end()) {
        throw ConfigError("config: unknown key '" + key + "'");
    }
    try {
        it->second(cfg, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
    }
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    const std::string trimmed = trim(text);
    if (!trimmed.empty() && trimmed.front() == '{') {
        json root;
        try {
            root = json::parse(trimmed);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config: invalid JSON: ") + e.what());
        }
        for (const auto& [key, value] : root.items()) {
            std::string v;
            if (value.is_string()) {
                v = value.get<std::string>();
            } else if (value.is_boolean()) {
                v = value.get<bool>() ? "true" : "false";
            } else {
                v = value.dump();
            }
            apply_key(cfg, key, v);
        }
        return cfg;
    }
    std::istringstream in(text);
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not a key=value pair: '" + stripped + "'");
        }
        apply_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
}

std::string RunConfig::canonical_echo() const {
    const KeyTable& table = key_table();
    std::ostringstream os;
    for (const std::string& key : table.order) {
        os << key << "=" << table.getters.at(key)(*this) << "\n";
    }
    return os.str();
}

void RunConfig::validate() const {
    if (train_data.empty()) {
        throw ConfigError("config: train_data is required");
    }
    if (batch_size < 1) {
        throw ConfigError("config: batch_size must be >= 1");
    }
    if (max_steps < 0 || max_epochs < 0 || eval_interval < 1 || patience < 1) {
        throw ConfigError("config: bad loop settings");
    }
    if (lr <= 0.0 || warmup_frac < 0.0 || warmup_frac > 1.0) {
        throw ConfigError("config: bad optimizer settings");
    }
}

ShgVqaModel build_model(const RunConfig& cfg, const VocabularySet& vocab) {
    Rng init = Rng(cfg.seed).fork("init");
    return ShgVqaModel(cfg.model, vocab, init);
}

namespace {

struct PreparedData {
    Dataset data;
    std::vector<Tensor> features;  // per clip
    std::map<std::string, std::size_t> index;
};

PreparedData prepare(const std::string& path, std::int64_t n, std::int64_t m,
                     TruncationStats* stats) {
    PreparedData out;
    out.data = load_dataset(path);
    TruncationStats s = truncate_to_query_budget(out.data, n, m);
    if (stats != nullptr) {
        stats->actions_dropped += s.actions_dropped;
        stats->relations_dropped += s.relations_dropped;
    }
    out.features.reserve(out.data.clips.size());
    for (const Clip& clip : out.data.clips) {
        out.features.push_back(materialize_features(clip, out.data.vocab));
    }
    out.index = out.data.clip_index();
    return out;
}

MetricsReport final_metrics(const RunConfig& cfg, const ShgVqaModel& model, const Dataset& eval_set,
                            std::vector<double> loss_curve) {
    MetricsReport report;
    VqaEvaluation vqa = evaluate_vqa(model, eval_set);
    report.overall_accuracy = vqa.overall.accuracy();
    for (const auto& [tag, acc] : vqa.per_category) {
        report.per_category[tag] = acc.accuracy();
    }
    if (!cfg.model.gt_graph && cfg.model.cross_inputs != CrossAttnInputs::q_v) {
        if (!cfg.model.relation_only) {
            report.action_map = evaluate_map(model, eval_set, QueryKind::action, cfg.map_variant).map;
        }
        if (!cfg.model.action_only) {
            report.relation_map =
                evaluate_map(model, eval_set, QueryKind::relation, cfg.map_variant).map;
        }
    }
    report.loss_curve = std::move(loss_curve);
    report.config_echo = cfg.canonical_echo();
    report.seed = cfg.seed;
    return report;
}

}  // namespace

TrainResult train(const RunConfig& cfg) {
    cfg.validate();
    TrainResult result;

    PreparedData train_set = prepare(cfg.train_data, cfg.model.n_action_queries,
                                     cfg.model.m_relation_queries, &result.truncation);
    const bool has_val = !cfg.val_data.empty();
    PreparedData val_set;
    if (has_val) {
        val_set = prepare(cfg.val_data, cfg.model.n_action_queries, cfg.model.m_relation_queries,
                          &result.truncation);
        if (!(val_set.data.vocab.actions == train_set.data.vocab.actions) ||
            !(val_set.data.vocab.predicates == train_set.data.vocab.predicates) ||
            !(val_set.data.vocab.answers == train_set.data.vocab.answers) ||
            !(val_set.data.vocab.words == train_set.data.vocab.words)) {
            throw ConfigError("train: train/val vocabularies differ");
        }
    }
    if (train_set.data.qa.empty()) {
        throw ConfigError("train: training dataset has no QA samples");
    }

    ShgVqaModel model = build_model(cfg, train_set.data.vocab);

    const std::int64_t n_samples = static_cast<std::int64_t>(train_set.data.qa.size());
    const std::int64_t steps_per_epoch = (n_samples + cfg.batch_size - 1) / cfg.batch_size;
    std::int64_t total_steps = steps_per_epoch * cfg.max_epochs;
    if (cfg.max_steps > 0) {
        total_steps = std::min(total_steps, cfg.max_steps);
    }

    NamedParams params = model.parameters();
    AdamOptimizer optimizer(params, LrSchedule{cfg.lr, cfg.warmup_frac, total_steps}, cfg.beta1,
                            cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.grad_clip);

    Rng data_rng = Rng(cfg.seed).fork("data");
    Rng dropout_rng = Rng(cfg.seed).fork("dropout");

    const Dataset& eval_data = has_val ? val_set.data : train_set.data;

    auto snapshot_of = [&params]() {
        std::vector<std::vector<double>> snap;
        snap.reserve(params.size());
        for (auto& [name, tensor] : params) {
            (void)name;
            snap.emplace_back(tensor.data().begin(), tensor.data().end());
        }
        return snap;
    };
    auto restore = [&params](const std::vector<std::vector<double>>& snap) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto dst = params[i].second.raw_data();
            std::copy(snap[i].begin(), snap[i].end(), dst.begin());
        }
    };

    std::vector<double> loss_curve;
    double best_accuracy = -1.0;
    std::vector<std::vector<double>> best_params;
    std::int64_t evals_since_improvement = 0;
    std::int64_t global_step = 0;
    bool stop = false;

    auto run_eval = [&]() {
        VqaEvaluation eval = evaluate_vqa(model, eval_data);
        const double acc = eval.overall.accuracy();
        if (acc > best_accuracy) {
            best_accuracy = acc;
            best_params = snapshot_of();
            evals_since_improvement = 0;
        } else {
            evals_since_improvement++;
        }
        return acc;
    };

    for (std::int64_t epoch = 0; epoch < cfg.max_epochs && !stop && total_steps > 0; ++epoch) {
        std::vector<std::size_t> order(train_set.data.qa.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        data_rng.shuffle(order);
        for (std::int64_t start = 0; start < n_samples && !stop; start += cfg.batch_size) {
            const std::int64_t stop_at = std::min(n_samples, start + cfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(stop_at - start);
            double batch_loss = 0.0;
            for (std::int64_t k = start; k < stop_at; ++k) {
                const QASample& qa = train_set.data.qa[order[static_cast<std::size_t>(k)]];
                const std::size_t clip_ix = train_set.index.at(qa.clip_id);
                Sample sample{train_set.features[clip_ix],
                              &train_set.data.clips[clip_ix].annotation, &qa};
                ForwardResult r = model.forward(sample, RunMode::train, &dropout_rng);
                batch_loss += r.total.item();
                autograd::backward(scale(r.total, inv_batch));
            }
            optimizer.step();
            loss_curve.push_back(batch_loss * inv_batch);
            global_step++;
            if (global_step >= total_steps) {
                stop = true;
            }
            if (global_step % cfg.eval_interval == 0 || stop) {
                run_eval();
                if (evals_since_improvement >= cfg.patience) {
                    stop = true;  // early stopping on validation accuracy
                }
            }
        }
    }

    if (best_params.empty()) {
        run_eval();  // 0-step run: initialization metrics only
    }
    if (!best_params.empty()) {
        restore(best_params);
    }

    result.report = final_metrics(cfg, model, eval_data, std::move(loss_curve));

    std::filesystem::create_directories(cfg.out_dir);
    result.checkpoint_path = (std::filesystem::path(cfg.out_dir) / "checkpoint.bin").string();
    result.report_path = (std::filesystem::path(cfg.out_dir) / "metrics.json").string();
    save_checkpoint(params, result.checkpoint_path);
    write_text_atomic(result.report_path, result.report.to_json());
    return result;
}

MetricsReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                                  const std::string& data_path) {
    TruncationStats stats;
    PreparedData data = prepare(data_path, cfg.model.n_action_queries,
                                cfg.model.m_relation_queries, &stats);
    ShgVqaModel model = build_model(cfg, data.data.vocab);
    NamedParams params = model.parameters();
    load_checkpoint(params, checkpoint_path);
    return final_metrics(cfg, model, data.data, {});
}

std::string dump_hypergraph(const ShgVqaModel& model, const Dataset& dataset,
                            const std::string& clip_id) {
    const Clip& clip = dataset.clip_by_id(clip_id);
    Tensor features = materialize_features(clip, dataset.vocab);

    autograd::NoGradGuard ng;
    Tensor memory = model.encode_video(model.adapt_features(features));
    const ModelConfig& cfg = model.config();

    json frames = json::array();
    SetPrediction actions =
        predict_sets(model.action_decoder().decode(memory).logits, cfg.n_action_queries,
                     cfg.n_actions);
    SetPrediction relations =
        predict_sets(model.relation_decoder().decode(memory).logits, cfg.m_relation_queries,
                     cfg.n_predicates);
    for (std::int64_t t = 0; t < clip.annotation.t_frames; ++t) {
        json frame = json::array();
        for (const PredictedItem& item : actions.frames[static_cast<std::size_t>(t)]) {
            json entry;
            entry["kind"] = "action";
            entry["label"] = dataset.vocab.actions.label(item.cls);
            entry["score"] = item.score;
            entry["raw_count"] = item.raw_count;
            frame.push_back(std::move(entry));
        }
        for (const PredictedItem& item : relations.frames[static_cast<std::size_t>(t)]) {
            const std::string label = dataset.vocab.predicates.label(item.cls);
            const PredicateTriplet triplet = unflatten_triplet(label);
            json entry;
            entry["kind"] = "relation";
            entry["label"] = label;
            entry["triplet"] = {{"subject", triplet.subject},
                                {"relation", triplet.relation},
                                {"object", triplet.object}};
            entry["score"] = item.score;
            entry["raw_count"] = item.raw_count;
            frame.push_back(std::move(entry));
        }
        frames.push_back(std::move(frame));
    }
    json root;
    root["clip_id"] = clip_id;
    root["frames"] = std::move(frames);
    return root.dump(2) + "\n";
}

}  // namespace shgvqa
