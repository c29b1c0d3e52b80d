#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "shgvqa/checkpoint.hpp"
#include "shgvqa/matching.hpp"
#include "shgvqa/synth.hpp"
#include "shgvqa/tensor.hpp"
#include "shgvqa/trainer.hpp"
#include "shgvqa/transformer.hpp"

namespace py = pybind11;
using namespace shgvqa;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    Shape shape(static_cast<std::size_t>(arr.ndim()));
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
        shape[static_cast<std::size_t>(i)] = arr.shape(i);
    }
    std::vector<double> data(arr.data(), arr.data() + arr.size());
    return Tensor::from_data(std::move(shape), std::move(data), false);
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::pair<std::vector<std::int64_t>, double> py_hungarian(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& cost) {
    if (cost.ndim() != 2 || cost.shape(0) != cost.shape(1)) {
        throw std::invalid_argument("hungarian_match expects a square 2-D cost matrix");
    }
    const std::int64_t n = cost.shape(0);
    std::vector<double> data(cost.data(), cost.data() + cost.size());
    std::vector<std::int64_t> assignment = hungarian_solve(data, n);
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        total += data[static_cast<std::size_t>(i * n + assignment[static_cast<std::size_t>(i)])];
    }
    return {assignment, total};
}

py::array_t<std::uint8_t> py_block_causal(std::int64_t frames, std::int64_t queries_per_frame) {
    AttentionMask mask = AttentionMask::block_causal(frames, queries_per_frame);
    const std::int64_t n = mask.q_len();
    py::array_t<std::uint8_t> out({n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            out.mutable_at(i, j) = mask.allowed(i, j) ? 1 : 0;
        }
    }
    return out;
}

std::string py_generate(std::uint64_t seed, const std::string& preset, const std::string& out_dir,
                        std::int64_t episodes, std::int64_t val_episodes) {
    SynthSpec spec = synth_preset(preset);
    if (episodes > 0) spec.episodes = episodes;
    if (val_episodes < 0) val_episodes = std::max<std::int64_t>(1, spec.episodes / 4);
    const std::int64_t train_episodes = spec.episodes;
    spec.episodes += val_episodes;
    Dataset full = synth_generate(seed, spec);

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
    const std::string train_path = out_dir + "/train.json";
    const std::string val_path = out_dir + "/val.json";
    save_dataset(train_ds, train_path);
    save_dataset(val_ds, val_path);
    return train_path;
}

std::string py_train(const std::string& config_text, const std::string& out_dir,
                     std::int64_t seed_override) {
    RunConfig cfg = RunConfig::parse_text(config_text);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    TrainResult result = train(cfg);
    return result.report.to_json();
}

std::string py_evaluate(const std::string& config_text, const std::string& checkpoint_path,
                        const std::string& data_path) {
    RunConfig cfg = RunConfig::parse_text(config_text);
    return evaluate_checkpoint(cfg, checkpoint_path, data_path).to_json();
}

std::string py_dump(const std::string& config_text, const std::string& checkpoint_path,
                    const std::string& data_path, const std::string& clip_id) {
    RunConfig cfg = RunConfig::parse_text(config_text);
    Dataset data = load_dataset(data_path);
    truncate_to_query_budget(data, cfg.model.n_action_queries, cfg.model.m_relation_queries);
    ShgVqaModel model = build_model(cfg, data.vocab);
    NamedParams params = model.parameters();
    load_checkpoint(params, checkpoint_path);
    return dump_hypergraph(model, data, clip_id);
}

}  // namespace

PYBIND11_MODULE(_shgvqa, m) {
    m.doc() = "situation hyper-graph VQA: core operations";

    m.def("hungarian_match", &py_hungarian, py::arg("cost"),
          "Minimum-cost assignment of a square cost matrix -> (row_to_col, total_cost)");
    m.def("build_block_causal_mask", &py_block_causal, py::arg("frames"),
          py::arg("queries_per_frame"),
          "Frame-level causal mask (1 = may attend) of shape (Q*T, Q*T)");
    m.def(
        "softmax",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, int axis) {
            return array_from_tensor(softmax(tensor_from_array(x), axis));
        },
        py::arg("x"), py::arg("axis") = -1);
    m.def(
        "gelu",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
            return array_from_tensor(gelu(tensor_from_array(x)));
        },
        py::arg("x"));
    m.def(
        "layer_norm",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double eps) {
            Tensor t = tensor_from_array(x);
            const std::int64_t d = t.dim(-1);
            return array_from_tensor(
                layer_norm(t, Tensor::full({d}, 1.0), Tensor::zeros({d}), eps));
        },
        py::arg("x"), py::arg("eps") = 1e-5);

    m.def("generate_synthetic", &py_generate, py::arg("seed"), py::arg("preset") = "toy",
          py::arg("out_dir") = "data", py::arg("episodes") = -1, py::arg("val_episodes") = -1,
          "Write train.json/val.json for a seeded synthetic corpus; returns the train path");
    m.def("train", &py_train, py::arg("config_text"), py::arg("out_dir") = "",
          py::arg("seed") = -1, "Train from a config (key=value or JSON text); returns the "
          "metrics report as a JSON string");
    m.def("evaluate", &py_evaluate, py::arg("config_text"), py::arg("checkpoint"), py::arg("data"),
          "Evaluate a checkpoint; returns the metrics report as a JSON string");
    m.def("dump_hypergraph", &py_dump, py::arg("config_text"), py::arg("checkpoint"),
          py::arg("data"), py::arg("clip_id"),
          "Predicted per-frame sets of one clip as a JSON string");
}
