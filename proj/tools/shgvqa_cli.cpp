#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "shgvqa/checkpoint.hpp"
#include "shgvqa/errors.hpp"
#include "shgvqa/synth.hpp"
#include "shgvqa/trainer.hpp"

namespace {

using namespace shgvqa;

// train/val split of one generated corpus: both files carry the same
// vocabularies so a model trained on one evaluates on the other.
void write_split(const Dataset& full, std::int64_t train_episodes, const std::string& out_dir) {
    Dataset train_ds, val_ds;
    train_ds.vocab = full.vocab;
    val_ds.vocab = full.vocab;
    std::map<std::string, bool> in_train;
    for (std::size_t i = 0; i < full.clips.size(); ++i) {
        const bool is_train = static_cast<std::int64_t>(i) < train_episodes;
        in_train[full.clips[i].annotation.clip_id] = is_train;
        (is_train ? train_ds : val_ds).clips.push_back(full.clips[i]);
    }
    for (const QASample& qa : full.qa) {
        (in_train.at(qa.clip_id) ? train_ds : val_ds).qa.push_back(qa);
    }
    std::filesystem::create_directories(out_dir);
    save_dataset(train_ds, (std::filesystem::path(out_dir) / "train.json").string());
    save_dataset(val_ds, (std::filesystem::path(out_dir) / "val.json").string());
}

int run_gen_data(std::uint64_t seed, const std::string& spec_name, const std::string& out_dir,
                 std::int64_t episodes, std::int64_t val_episodes, std::int64_t qa_per_episode,
                 double sigma, const std::string& mode) {
    SynthSpec spec = synth_preset(spec_name);
    if (episodes > 0) spec.episodes = episodes;
    if (val_episodes < 0) val_episodes = std::max<std::int64_t>(1, spec.episodes / 4);
    if (qa_per_episode > 0) spec.qa_per_episode = qa_per_episode;
    if (sigma >= 0.0) spec.noise_sigma = sigma;
    if (!mode.empty()) {
        if (mode == "multiple_choice") {
            spec.qa_mode = QaMode::multiple_choice;
        } else if (mode == "open_ended") {
            spec.qa_mode = QaMode::open_ended;
        } else {
            throw ConfigError("gen-data: unknown mode '" + mode + "'");
        }
    }
    const std::int64_t train_episodes = spec.episodes;
    spec.episodes += val_episodes;
    Dataset full = synth_generate(seed, spec);
    write_split(full, train_episodes, out_dir);
    std::cout << "wrote " << out_dir << "/train.json (" << train_episodes << " episodes) and "
              << out_dir << "/val.json (" << val_episodes << " episodes)\n";
    return 0;
}

int run_train(const std::string& config_path, std::int64_t seed_override,
              const std::string& out_override) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;
    TrainResult result = train(cfg);
    if (result.truncation.actions_dropped > 0 || result.truncation.relations_dropped > 0) {
        std::cerr << "warning: truncated " << result.truncation.actions_dropped << " action and "
                  << result.truncation.relations_dropped
                  << " relation labels to fit the query budget\n";
    }
    std::cout << "checkpoint: " << result.checkpoint_path << "\n"
              << "metrics:    " << result.report_path << "\n"
              << "overall_accuracy=" << result.report.overall_accuracy
              << " action_map=" << result.report.action_map
              << " relation_map=" << result.report.relation_map << "\n";
    return 0;
}

int run_eval(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& data_path, const std::string& out_path) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    MetricsReport report = evaluate_checkpoint(cfg, checkpoint_path, data_path);
    const std::string text = report.to_json();
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_text_atomic(out_path, text);
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

int run_dump_graph(const std::string& config_path, const std::string& checkpoint_path,
                   const std::string& data_path, const std::string& clip_id,
                   const std::string& out_path) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    Dataset data = load_dataset(data_path);
    truncate_to_query_budget(data, cfg.model.n_action_queries, cfg.model.m_relation_queries);
    ShgVqaModel model = build_model(cfg, data.vocab);
    NamedParams params = model.parameters();
    load_checkpoint(params, checkpoint_path);
    const std::string text = dump_hypergraph(model, data, clip_id);
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_text_atomic(out_path, text);
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

int run_report(const std::string& metrics_path) {
    std::ifstream in(metrics_path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open metrics file '" + metrics_path + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    MetricsReport report = MetricsReport::from_json(buf.str());
    std::cout << "seed: " << report.seed << "\n";
    std::cout << "overall accuracy: " << report.overall_accuracy << "\n";
    for (const auto& [tag, acc] : report.per_category) {
        std::cout << "  " << tag << ": " << acc << "\n";
    }
    std::cout << "action mAP:   " << report.action_map << "\n";
    std::cout << "relation mAP: " << report.relation_map << "\n";
    if (!report.loss_curve.empty()) {
        std::cout << "steps: " << report.loss_curve.size() << ", first loss "
                  << report.loss_curve.front() << ", last loss " << report.loss_curve.back()
                  << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"situation hyper-graph video question answering harness"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string spec_name = "toy";
    std::string out_dir = "data";
    std::int64_t episodes = -1, val_episodes = -1, qa_per_episode = -1;
    double sigma = -1.0;
    std::string mode;
    auto* gen = app.add_subcommand("gen-data", "generate a seeded synthetic dataset");
    gen->add_option("--seed", seed, "root seed for all randomness");
    gen->add_option("--spec", spec_name, "preset: toy | micro");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--episodes", episodes, "training episodes");
    gen->add_option("--val-episodes", val_episodes, "held-out episodes");
    gen->add_option("--qa-per-episode", qa_per_episode, "questions per episode");
    gen->add_option("--sigma", sigma, "feature noise sigma");
    gen->add_option("--mode", mode, "multiple_choice | open_ended");

    std::string config_path, out_override, checkpoint_path, data_path, clip_id, metrics_path,
        out_path;
    std::int64_t seed_override = -1;
    auto* tr = app.add_subcommand("train", "train a model from a config file");
    tr->add_option("--config", config_path, "key=value or JSON config")->required();
    tr->add_option("--seed", seed_override, "override the config seed");
    tr->add_option("--out", out_override, "override the output directory");

    std::string eval_config, eval_ckpt, eval_data, eval_out;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--config", eval_config)->required();
    ev->add_option("--checkpoint", eval_ckpt)->required();
    ev->add_option("--data", eval_data)->required();
    ev->add_option("--out", eval_out, "metrics file (stdout when omitted)");

    std::string dump_config, dump_ckpt, dump_data, dump_out;
    auto* dg = app.add_subcommand("dump-graph", "dump the predicted hyper-graph of one clip");
    dg->add_option("--config", dump_config)->required();
    dg->add_option("--checkpoint", dump_ckpt)->required();
    dg->add_option("--data", dump_data)->required();
    dg->add_option("--clip", clip_id)->required();
    dg->add_option("--out", dump_out, "dump file (stdout when omitted)");

    auto* rp = app.add_subcommand("report", "pretty-print a metrics file");
    rp->add_option("--metrics", metrics_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) {
            return run_gen_data(seed, spec_name, out_dir, episodes, val_episodes, qa_per_episode,
                                sigma, mode);
        }
        if (tr->parsed()) {
            return run_train(config_path, seed_override, out_override);
        }
        if (ev->parsed()) {
            return run_eval(eval_config, eval_ckpt, eval_data, eval_out);
        }
        if (dg->parsed()) {
            return run_dump_graph(dump_config, dump_ckpt, dump_data, clip_id, dump_out);
        }
        if (rp->parsed()) {
            return run_report(metrics_path);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
