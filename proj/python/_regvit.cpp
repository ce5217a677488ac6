#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "regvit/errors.hpp"
#include "regvit/interp.hpp"
#include "regvit/lost.hpp"
#include "regvit/metrics.hpp"
#include "regvit/probes.hpp"
#include "regvit/rng.hpp"
#include "regvit/scenes.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"

namespace py = pybind11;
using namespace regvit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.x0, b.y0, b.x1, b.y1); }
Box to_box(const std::tuple<int, int, int, int>& t) {
  return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)};
}

py::list array_list(const std::vector<Tensor>& ts) {
  py::list out;
  for (const auto& t : ts) out.append(to_array(t));
  return out;
}

py::dict trace_dict(const ForwardTrace& t) {
  py::dict d;
  d["logits"] = to_array(t.logits);
  d["grid"] = py::make_tuple(t.grid.rows, t.grid.cols);
  d["n_registers"] = t.n_registers;
  if (t.captured) {
    d["patch_embeddings"] = to_array(t.patch_embeddings);
    d["states"] = array_list(t.states);
    d["attention"] = array_list(t.attention);
    d["queries"] = array_list(t.queries);
    d["keys"] = array_list(t.keys);
    d["values"] = array_list(t.values);
    d["output"] = to_array(t.output());
  }
  return d;
}

py::dict summary_dict(const NormSummary& s) {
  py::dict d;
  d["q1"] = s.q1, d["q25"] = s.q25, d["q50"] = s.q50, d["q75"] = s.q75, d["q99"] = s.q99, d["max"] = s.max;
  return d;
}

}  // namespace

PYBIND11_MODULE(_regvit, m) {
  m.doc() = "Register-token ViT lab: models, artifact metrics, probes, LOST and resize numerics";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      error((e.kind() + ": " + e.what()).c_str());
    }
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("image_size", &ModelConfig::image_size)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("depth", &ModelConfig::depth)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("n_registers", &ModelConfig::n_registers)
      .def_readwrite("n_classes", &ModelConfig::n_classes)
      .def_readwrite("register_pos_embed", &ModelConfig::register_pos_embed)
      .def_readwrite("ln_eps", &ModelConfig::ln_eps)
      .def("validate", &ModelConfig::validate)
      .def_property_readonly("num_patches", &ModelConfig::num_patches)
      .def_property_readonly("seq_len", &ModelConfig::seq_len)
      .def_property_readonly("grid", [](const ModelConfig& c) { return py::make_tuple(c.grid().rows, c.grid().cols); })
      .def("to_json", &config_to_json)
      .def_static("from_json", &config_from_json)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + config_to_json(c) + ")"; });

  m.def("toy_model_config", &toy_model_config);
  m.def("count_params", &count_params, py::arg("config"));
  m.def("count_flops", &count_flops, py::arg("config"));
  m.def("flops_formula", &flops_formula);

  py::class_<Params>(m, "Params")
      .def("named_arrays", [](const Params& p) {
        py::dict d;
        p.for_each([&](const std::string& name, const Tensor& t) { d[py::str(name)] = to_array(t); });
        return d;
      })
      .def_property_readonly("total_scalars", [](const Params& p) { return total_scalars(p); });
  m.def("init_params", &init_params, py::arg("config"), py::arg("seed"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("dir"), py::arg("config"), py::arg("params"));
  m.def("load_checkpoint", [](const std::filesystem::path& dir) {
    Checkpoint ck = load_checkpoint(dir);
    return py::make_tuple(ck.config, std::move(ck.params));
  }, py::arg("dir"));

  m.def("run_model", [](const Array& image, const Params& params, const ModelConfig& config, bool capture) {
    py::gil_scoped_release release;
    ForwardTrace t = run_model(to_tensor(image), params, config, capture);
    py::gil_scoped_acquire acquire;
    return trace_dict(t);
  }, py::arg("image"), py::arg("params"), py::arg("config"), py::arg("capture") = true,
        "C×H×W image → dict with logits and, when captured, states, attention, q/k/v and outputs.");
  m.def("attention_map", [](const Array& image, const Params& params, const ModelConfig& config, int layer,
                            std::optional<std::size_t> head, std::size_t query) {
    const ForwardTrace t = run_model(to_tensor(image), params, config, true);
    const AttentionMap a = attention_map(t, layer, head, query);
    return py::make_tuple(to_array(a.map), a.nonstandard_query);
  }, py::arg("image"), py::arg("params"), py::arg("config"), py::arg("layer") = -1, py::arg("head") = py::none(),
        py::arg("query") = 0);

  m.def("synth_dataset", [](std::uint64_t seed, std::size_t n, std::size_t image_size, const std::string& background,
                            const std::string& class_rule) {
    SceneSpec spec;
    spec.image_size = image_size;
    spec.background = parse_background(background);
    spec.class_rule = parse_class_rule(class_rule);
    spec.validate();
    py::list out;
    for (const Sample& s : synth_dataset(seed, n, spec)) {
      py::dict d;
      d["image"] = to_array(s.image);
      d["label"] = s.label;
      d["box"] = box_tuple(s.box);
      d["mask"] = to_array(s.mask);
      out.append(d);
    }
    return out;
  }, py::arg("seed"), py::arg("n"), py::arg("image_size") = 32, py::arg("background") = "uniform",
        py::arg("class_rule") = "shape");

  m.def("token_norms", [](const Array& x) { return to_array(token_norms(to_tensor(x))); });
  m.def("detect_outliers", [](const Array& norms, double tau, std::size_t n_cls, std::size_t n_registers) {
    const OutlierReport r = detect_outliers(to_tensor(norms), tau, TokenLayout{n_cls, n_registers});
    py::dict d;
    d["mask"] = r.mask;
    d["proportion"] = r.proportion;
    d["tau"] = r.tau;
    py::dict by_type;
    for (auto t : {TokenType::Cls, TokenType::Register, TokenType::Patch}) {
      const TypeSummary& s = r.summary(t);
      by_type[to_string(t)] = py::dict(py::arg("count") = s.count, py::arg("outliers") = s.outliers,
                                       py::arg("mean_norm") = s.mean_norm, py::arg("max_norm") = s.max_norm);
    }
    d["by_type"] = by_type;
    return d;
  }, py::arg("norms"), py::arg("tau"), py::arg("n_cls") = 0, py::arg("n_registers") = 0);
  m.def("auto_threshold", [](const std::vector<double>& norms) {
    const Threshold t = auto_threshold(norms);
    return py::dict(py::arg("tau") = t.tau, py::arg("separability") = t.separability,
                    py::arg("confidence") = t.confidence, py::arg("low_confidence") = t.low_confidence);
  });
  m.def("summarize_norms", [](std::vector<double> v) { return summary_dict(summarize_norms(std::move(v))); });
  m.def("neighbor_cosine", [](const Array& patch_embeds, std::size_t rows, std::size_t cols,
                              std::optional<std::vector<bool>> mask) {
    const NeighborCosine nc = neighbor_cosine(to_tensor(patch_embeds), {rows, cols},
                                              mask.value_or(std::vector<bool>(rows * cols, false)));
    return py::dict(py::arg("per_patch") = to_array(nc.per_patch), py::arg("outlier") = nc.outlier_dist,
                    py::arg("normal") = nc.normal_dist, py::arg("zero_vector") = nc.zero_vector);
  }, py::arg("patch_embeds"), py::arg("rows"), py::arg("cols"), py::arg("mask") = py::none());
  m.def("position_heatmap", [](const std::vector<Array>& per_image, std::size_t rows, std::size_t cols, double tau) {
    std::vector<Tensor> ts;
    for (const auto& a : per_image) ts.push_back(to_tensor(a));
    const PositionHeatmap h = position_heatmap(ts, {rows, cols}, tau);
    return py::make_tuple(to_array(h.frequency), h.counts);
  }, py::arg("patch_norms"), py::arg("rows"), py::arg("cols"), py::arg("tau"));

  m.def("fit_ridge", [](const Array& x, const Array& y, double lambda) {
    return to_array(fit_ridge(to_tensor(x), to_tensor(y), lambda));
  }, py::arg("x"), py::arg("y"), py::arg("lam"));
  m.def("logistic_probe_accuracy", [](const Array& x, const std::vector<std::size_t>& y, const Array& x_test,
                                      const std::vector<std::size_t>& y_test, double lambda, std::size_t steps,
                                      double lr) {
    const LogisticModel model = fit_logistic(to_tensor(x), y, {lambda, steps, lr});
    return accuracy(predict(model, to_tensor(x_test)), y_test);
  }, py::arg("x"), py::arg("y"), py::arg("x_test"), py::arg("y_test"), py::arg("lam") = 1e-4, py::arg("steps") = 500,
        py::arg("lr") = 0.1);
  m.def("position_probe", [](const Array& tokens, std::size_t rows, std::size_t cols) {
    const PositionProbeResult r = position_probe(to_tensor(tokens), {rows, cols});
    return py::make_tuple(r.top1, r.mean_distance);
  }, py::arg("tokens"), py::arg("rows"), py::arg("cols"));
  m.def("reconstruction_probe", [](const Array& tokens, const Array& pixels, std::optional<double> lambda) {
    return lambda ? reconstruction_probe(to_tensor(tokens), to_tensor(pixels), *lambda)
                  : reconstruction_probe(to_tensor(tokens), to_tensor(pixels));
  }, py::arg("tokens"), py::arg("pixels"), py::arg("lam") = py::none());
  m.def("is_held_out", &is_held_out);

  m.def("gram_with_bias", [](const Array& f, double b) { return to_array(gram_with_bias(to_tensor(f), b)); });
  m.def("auto_bias", [](const Array& f) { return auto_bias(to_tensor(f)); });
  m.def("select_seed", [](const Array& a) { return select_seed(to_tensor(a)); });
  m.def("default_k", &default_k);
  m.def("run_lost", [](const Array& features, std::size_t rows, std::size_t cols, double bias,
                       std::optional<std::size_t> k) {
    const LostIntermediates r = run_lost(to_tensor(features), {rows, cols}, bias, k);
    return py::dict(py::arg("seed") = r.seed, py::arg("degrees") = r.degrees, py::arg("expansion") = r.expansion,
                    py::arg("mask") = r.mask, py::arg("box") = box_tuple(r.box),
                    py::arg("similarity") = to_array(r.similarity));
  }, py::arg("features"), py::arg("rows"), py::arg("cols"), py::arg("bias"), py::arg("k") = py::none());
  m.def("planted_scene", [](std::uint64_t seed, std::size_t rows, std::size_t cols, std::size_t dim, double noise) {
    const PlantedScene s = planted_scene(seed, {rows, cols}, dim, noise);
    return py::make_tuple(to_array(s.features), box_tuple(s.object));
  }, py::arg("seed"), py::arg("rows"), py::arg("cols"), py::arg("dim"), py::arg("noise") = 0.05);
  m.def("iou", [](const std::tuple<int, int, int, int>& a, const std::tuple<int, int, int, int>& b) {
    return iou(to_box(a), to_box(b));
  });
  m.def("corloc", [](const std::vector<std::tuple<int, int, int, int>>& preds,
                     const std::vector<std::vector<std::tuple<int, int, int, int>>>& gts) {
    std::vector<Box> p;
    std::vector<std::vector<Box>> g;
    for (const auto& b : preds) p.push_back(to_box(b));
    for (const auto& list : gts) {
      g.emplace_back();
      for (const auto& b : list) g.back().push_back(to_box(b));
    }
    return corloc(p, g).corloc;
  });

  py::class_<ResizeSpec>(m, "ResizeSpec")
      .def(py::init([](std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w, bool antialias,
                       double a) {
        ResizeSpec s{src_h, src_w, dst_h, dst_w, antialias, a};
        s.validate();
        return s;
      }), py::arg("src_h") = 16, py::arg("src_w") = 16, py::arg("dst_h") = 7, py::arg("dst_w") = 7,
           py::arg("antialias") = false, py::arg("a") = -0.5)
      .def_readonly("src_h", &ResizeSpec::src_h)
      .def_readonly("src_w", &ResizeSpec::src_w)
      .def_readonly("dst_h", &ResizeSpec::dst_h)
      .def_readonly("dst_w", &ResizeSpec::dst_w)
      .def_readonly("antialias", &ResizeSpec::antialias);
  m.def("cubic_kernel", &cubic_kernel, py::arg("t"), py::arg("a") = -0.5);
  m.def("resize_weights", [](std::size_t in, std::size_t out, bool aa, double a) {
    return to_array(resize_weights(in, out, aa, a));
  }, py::arg("n_in"), py::arg("n_out"), py::arg("antialias") = false, py::arg("a") = -0.5);
  m.def("bicubic_resize", [](const Array& map, const ResizeSpec& spec) {
    return to_array(bicubic_resize(to_tensor(map), spec));
  }, "H×W×d map → H'×W'×d.");
  m.def("unit_gradient_map", [](const ResizeSpec& s) { return to_array(unit_gradient_map(s)); });
  m.def("striping_metric", [](const Array& g) { return striping_metric(to_tensor(g)); });

  m.def("train", [](const ModelConfig& config, std::size_t steps, std::size_t n_train, std::uint64_t seed, double lr) {
    TrainConfig tc;
    tc.steps = steps;
    tc.seed = seed;
    tc.lr = lr;
    tc.checkpoint_every = steps;
    const Dataset data = synth_dataset(derive_seed(seed, 100), n_train, SceneSpec{config.image_size, config.channels});
    py::gil_scoped_release release;
    TrainResult r = train(config, tc, data);
    const double acc = evaluate(r.params, config, data);
    py::gil_scoped_acquire acquire;
    py::list log;
    for (const auto& row : r.log) log.append(py::make_tuple(row.step, row.loss, row.accuracy));
    return py::make_tuple(std::move(r.params), log, acc);
  }, py::arg("config"), py::arg("steps") = 2000, py::arg("n_train") = 128, py::arg("seed") = 0, py::arg("lr") = 1e-3,
        "Trains on the synthetic shape task; returns (params, [(step, loss, accuracy)], train accuracy).");

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs a regvit command in-process; returns (exit code, stdout, stderr).");
}
