#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "bmt/binarizer.hpp"
#include "bmt/bitkernel.hpp"
#include "bmt/checkpoint.hpp"
#include "bmt/config.hpp"
#include "bmt/decode.hpp"
#include "bmt/experiments.hpp"
#include "bmt/scalelaw.hpp"

namespace py = pybind11;
using namespace bmt;

namespace {

using Array = py::array_t<Real, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<Real>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict metric_row(const MetricRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["stage"] = r.stage;
  d["lr"] = r.lr;
  d["train_loss"] = r.train_loss;
  d["eval_loss"] = r.eval_loss;
  d["token_acc"] = r.token_acc;
  return d;
}

RunConfig make_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  RunConfig c;
  c.apply(text);
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Binarized encoder-decoder transformers: quantizer, bit kernels, training and decoding";

  // Translators run newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "binarize",
      [](const Array& x, double bound) {
        const BinarizeSpec spec = bound > 0 ? BinarizeSpec::fixed(bound) : BinarizeSpec::dynamic(-1);
        const Tensor t = to_tensor(x);
        return to_array(binarize(t, compute_bound(t, spec), spec));
      },
      py::arg("x"), py::arg("bound") = 0.0,
      "Map every element to +-B/2. bound <= 0 uses the max |x| of each last-axis slice.");

  m.def(
      "ste_mask",
      [](const Array& x, double bound) {
        const BinarizeSpec spec = bound > 0 ? BinarizeSpec::fixed(bound) : BinarizeSpec::dynamic(-1);
        Tensor t = Tensor::parameter(Shape(x.shape(), x.shape() + x.ndim()),
                                     std::vector<Real>(x.data(), x.data() + x.size()));
        backward(sum(binarize_ste(t, spec)));
        Array out(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
        std::copy(t.grad().begin(), t.grad().end(), out.mutable_data());
        return out;
      },
      py::arg("x"), py::arg("bound") = 0.0, "Straight-through gradient of sum(binarize(x)).");

  m.def(
      "binary_matmul",
      [](const Array& a, const Array& w) {
        const Tensor ta = to_tensor(a), tw = to_tensor(w);
        if (ta.rank() != 2 || tw.rank() != 2) throw ShapeError("binary_matmul: expected 2-D arrays");
        const BinarizeSpec sa = activation_spec(0), sw = weight_spec(0);
        const Tensor ba = compute_bound(ta, sa), bw = compute_bound(tw, sw);
        const Tensor ab = binarize(ta, ba, sa), wb = binarize(tw, bw, sw);
        const Tensor packed =
            bmt::binary_matmul(pack(ab, ba, PackOrientation::kRows), pack(wb, bw, PackOrientation::kCols));
        return py::make_tuple(to_array(packed), to_array(matmul(ab, wb)));
      },
      py::arg("a"), py::arg("w"),
      "Binarize a [N,D] per row and w [D,K] per column; return (packed kernel, float) products.");

  m.def(
      "variance_oracle",
      [](int d, double b, int trials, std::uint64_t seed) {
        const VarianceReport r = bmt::variance_oracle(d, b, trials, seed);
        py::dict out;
        out["empirical_var"] = r.empirical_var;
        out["theory_var"] = r.theory_var;
        out["float_var"] = r.float_var;
        out["inflation"] = r.inflation();
        return out;
      },
      py::arg("d"), py::arg("b"), py::arg("trials") = 100000, py::arg("seed") = 1);

  m.def(
      "benchmark",
      [](std::size_t n, std::size_t d, std::size_t k, int reps) {
        const BenchResult r = bmt::benchmark(n, d, k, reps);
        py::dict out;
        out["packed_gops"] = r.packed_gops;
        out["float_gops"] = r.float_gops;
        out["speedup"] = r.speedup;
        out["max_rel_error"] = r.max_rel_error;
        return out;
      },
      py::arg("n") = 8, py::arg("d") = 4096, py::arg("k") = 8, py::arg("reps") = 5);

  m.def(
      "resolve_config",
      [](const std::string& text, const std::map<std::string, std::string>& overrides) {
        return make_config(text, overrides).items();
      },
      py::arg("text") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      "Resolved (key, value) pairs of a flat key=value config.");

  py::class_<Transformer, std::shared_ptr<Transformer>>(m, "Model")
      .def_static(
          "load", [](const std::string& path) { return std::make_shared<Transformer>(load_checkpoint(path)); },
          py::arg("path"))
      .def_property_readonly("vocab_size", [](const Transformer& t) { return t.config().vocab_size; })
      .def_property_readonly("uses_packed_weights", &Transformer::uses_packed_weights)
      .def(
          "save", [](const Transformer& t, const std::string& path, bool packed) { save_checkpoint(path, t, packed); },
          py::arg("path"), py::arg("packed") = false)
      .def(
          "logits",
          [](Transformer& t, const std::vector<int>& src, const std::vector<int>& tgt_in) {
            NoGradGuard ng;
            return to_array(t.forward(TokenBatch::from_sequences({src}), TokenBatch::from_sequences({tgt_in})));
          },
          py::arg("src"), py::arg("tgt_in"), "Logits [1, T, vocab] for a BOS-prefixed decoder input.")
      .def(
          "translate",
          [](Transformer& t, const std::vector<int>& src, int beam, double alpha, int max_len) {
            DecodeOptions o;
            o.beam_size = beam;
            o.alpha = alpha;
            o.max_len = max_len;
            const DecodedExample d = decode_all(t, {src}, o).front();
            return py::make_tuple(d.output.tokens, d.output.score);
          },
          py::arg("src"), py::arg("beam") = 4, py::arg("alpha") = 0.6, py::arg("max_len") = 0);

  m.def(
      "train",
      [](const std::string& config_text, const std::map<std::string, std::string>& overrides,
         const std::string& out_dir) {
        const RunConfig c = make_config(config_text, overrides);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = run_training(c, out_dir, !out_dir.empty());
        }
        py::list rows;
        for (const auto& row : r.rows) rows.append(metric_row(row));
        return py::make_tuple(r.model, rows);
      },
      py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("out_dir") = "",
      "Train from flat config text; returns (model, metric rows).");

  m.def(
      "fit_scaling_law",
      [](const std::vector<std::tuple<double, double, double>>& points, double nbar_e, double nbar_d) {
        std::vector<ScalingPoint> pts;
        for (const auto& [ne, nd, l] : points) pts.push_back({ne, nd, l});
        const ScalingLawFit f = bmt::fit_scaling_law(pts, nbar_e, nbar_d);
        py::dict out;
        out["alpha"] = f.alpha;
        out["p_e"] = f.p_e;
        out["p_d"] = f.p_d;
        out["l_inf"] = f.l_inf;
        out["r2"] = f.r_squared;
        out["degenerate"] = f.degenerate;
        out["residuals"] = residuals(f, pts);
        return out;
      },
      py::arg("points"), py::arg("nbar_e"), py::arg("nbar_d"),
      "Fit L = alpha (nbar_e/N_e)^p_e (nbar_d/N_d)^p_d + L_inf to (N_e, N_d, loss) triples.");

  m.def("bleu", &bmt::bleu, py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4);
  m.def("sentence_bleu", &bmt::sentence_bleu, py::arg("hyp"), py::arg("ref"), py::arg("max_n") = 4);
  m.def("mbr_argmax", &bmt::mbr_argmax, py::arg("utility"));
  m.def("length_penalty", &bmt::length_penalty, py::arg("n"), py::arg("alpha"));
}
