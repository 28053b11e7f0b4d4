#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "pni/attacks.hpp"
#include "pni/checkpoint.hpp"
#include "pni/error.hpp"
#include "pni/evaluation.hpp"
#include "pni/experiment.hpp"
#include "pni/noise.hpp"
#include "pni/train.hpp"

namespace py = pybind11;
using namespace pni;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array vec_array(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict batch_dict(const AdversarialBatch& b) {
  py::dict d;
  d["x_adv"] = to_array(b.x_adv);
  d["labels"] = b.labels;
  d["success"] = std::vector<bool>(b.success.begin(), b.success.end());
  d["l2"] = vec_array(b.l2);
  d["linf"] = vec_array(b.linf);
  d["queries"] = b.queries;
  d["success_rate"] = b.success_rate();
  return d;
}

template <typename J>
py::object json_to_py(const J& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

Dataset make_dataset(const Array& inputs, const std::vector<int>& labels, std::size_t classes, const std::string& split) {
  if (inputs.ndim() != 4) throw DimensionError("inputs must be [N, C, H, W]");
  Dataset d;
  d.sample_shape = {static_cast<std::size_t>(inputs.shape(1)), static_cast<std::size_t>(inputs.shape(2)),
                    static_cast<std::size_t>(inputs.shape(3))};
  d.inputs.assign(inputs.data(), inputs.data() + inputs.size());
  d.labels = labels;
  d.classes = classes;
  d.split = split;
  d.validate();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parametric noise injection: models, attacks and adversarial training";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<IndexError>(m, "IndexError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<IntegrityError>(m, "IntegrityError", base);
  py::register_exception<VersionError>(m, "VersionError", base);
  py::register_exception<AttackError>(m, "AttackError", base);
  py::register_exception<TrainingError>(m, "TrainingError", base);

  // noise primitives
  m.def("tensor_std", [](const Array& v) { return tensor_std(std::span<const double>(v.data(), v.size())); });
  m.def(
      "pni_forward",
      [](const Array& v, double alpha, const Array& unit_draws) {
        Tensor a({1}, {alpha});
        const NoisyTensor out = pni_forward_from_draws(to_tensor(v), a, std::span<const double>(unit_draws.data(), unit_draws.size()));
        return py::make_tuple(to_array(out.value), to_array(out.eta));
      },
      py::arg("v"), py::arg("alpha"), py::arg("unit_draws"),
      "v + alpha * eta with eta = std(v) * unit_draws. Returns (value, eta).");
  m.def("parse_placement", [](const std::string& s) { return std::string(to_string(parse_placement(s))); });

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("inputs"), py::arg("labels"), py::arg("classes"), py::arg("split") = "train")
      .def_property_readonly("inputs", [](const Dataset& d) { return to_array(d.all_inputs()); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("classes", &Dataset::classes)
      .def_readonly("split", &Dataset::split)
      .def("__len__", &Dataset::size)
      .def("slice", &Dataset::slice);

  m.def(
      "make_synthetic",
      [](std::size_t samples, std::size_t classes, std::size_t height, std::size_t width, double pixel_noise,
         double blob_width, double amplitude_min, double jitter, std::uint64_t seed, const std::string& split) {
        SyntheticConfig c;
        c.samples = samples;
        c.classes = classes;
        c.height = height;
        c.width = width;
        c.pixel_noise = pixel_noise;
        c.blob_width = blob_width;
        c.amplitude_min = amplitude_min;
        c.jitter = jitter;
        c.seed = seed;
        return make_synthetic(c, split);
      },
      py::arg("samples") = 1000, py::arg("classes") = 10, py::arg("height") = 16, py::arg("width") = 16,
      py::arg("pixel_noise") = 0.1, py::arg("blob_width") = 0.1, py::arg("amplitude_min") = 0.6,
      py::arg("jitter") = 0.5, py::arg("seed") = 0, py::arg("split") = "train");
  m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"), py::arg("split") = "train",
        py::arg("classes") = 0);
  m.def("save_idx", &save_idx, py::arg("dataset"), py::arg("images"), py::arg("labels"));

  py::class_<ModelSpec>(m, "ModelSpec")
      .def_static(
          "desk_cnn",
          [](std::size_t c, std::size_t h, std::size_t w, std::size_t k, const std::string& p, std::size_t mult) {
            return ModelSpec::desk_cnn(c, h, w, k, parse_placement(p), mult);
          },
          py::arg("channels"), py::arg("height"), py::arg("width"), py::arg("classes"), py::arg("placement") = "none",
          py::arg("multiplier") = 1)
      .def_static(
          "mlp",
          [](std::size_t in, std::vector<std::size_t> hidden, std::size_t k, const std::string& p) {
            return ModelSpec::mlp(in, std::move(hidden), k, parse_placement(p));
          },
          py::arg("inputs"), py::arg("hidden"), py::arg("classes"), py::arg("placement") = "none")
      .def_readonly("classes", &ModelSpec::classes)
      .def_readonly("input_shape", &ModelSpec::input_shape)
      .def("to_json", [](const ModelSpec& s) { return json_to_py(to_json(s)); });

  py::class_<Model>(m, "Model")
      .def_static("create", &Model::create, py::arg("spec"), py::arg("seed") = 0,
                  py::arg("alpha_init") = PniCoefficient::kDefaultAlpha)
      .def_property_readonly("spec", &Model::spec)
      .def(
          "logits",
          [](const Model& model, const Array& x, bool noisy, std::uint64_t seed) {
            NoiseContext noise = noisy ? NoiseContext::sampling(Rng(seed)) : NoiseContext::off();
            ForwardOptions o;
            o.parameter_grads = false;
            return to_array(model.forward(to_tensor(x), noise, o));
          },
          py::arg("x"), py::arg("noisy") = false, py::arg("seed") = 0)
      .def(
          "predict",
          [](const Model& model, const Array& x, bool noisy, std::uint64_t seed) {
            Rng rng(seed);
            return predict_label(model, to_tensor(x), noisy, rng);
          },
          py::arg("x"), py::arg("noisy") = false, py::arg("seed") = 0)
      .def_property_readonly("alpha",
                             [](const Model& model) {
                               std::map<std::string, double> out;
                               for (const auto& c : model.coefficients()) out[c.layer_id] = c.value();
                               return out;
                             })
      .def("set_alpha",
           [](Model& model, const std::string& id, double v) {
             for (auto& c : model.coefficients()) {
               if (c.layer_id == id) return c.set_value(v);
             }
             throw ConfigError("no noise site '" + id + "'", "alpha");
           })
      .def("parameter", [](const Model& model, const std::string& name) { return to_array(model.parameter(name)); })
      .def("parameter_names", [](const Model& model) {
        std::vector<std::string> out;
        for (const auto& p : model.parameters()) out.push_back(p.name);
        return out;
      });

  auto attack_config = [](double eps, double step, std::size_t n, bool noisy, bool random_start) {
    AttackConfig a;
    a.epsilon = eps;
    a.step_size = step;
    a.n_step = n;
    a.with_pni_in_generation = noisy;
    a.random_start = random_start;
    return a;
  };
  m.def(
      "fgsm",
      [attack_config](const Model& model, const Array& x, const std::vector<int>& labels, double epsilon, bool noisy,
                      std::uint64_t seed) {
        Rng rng(seed);
        return batch_dict(fgsm(model, to_tensor(x), labels, attack_config(epsilon, epsilon, 1, noisy, false), rng));
      },
      py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("epsilon") = 0.15, py::arg("noisy") = true,
      py::arg("seed") = 0);
  m.def(
      "pgd",
      [attack_config](const Model& model, const Array& x, const std::vector<int>& labels, double epsilon,
                      double step_size, std::size_t n_step, bool noisy, bool random_start, std::uint64_t seed) {
        Rng rng(seed);
        return batch_dict(
            pgd(model, to_tensor(x), labels, attack_config(epsilon, step_size, n_step, noisy, random_start), rng));
      },
      py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("epsilon") = 0.15, py::arg("step_size") = 0.01,
      py::arg("n_step") = 7, py::arg("noisy") = true, py::arg("random_start") = false, py::arg("seed") = 0);
  m.def(
      "cw_l2",
      [](const Model& model, const Array& x, const std::vector<int>& labels, double initial_c, double k,
         std::size_t search_steps, std::size_t iterations, double lr, bool noisy, std::uint64_t seed) {
        CwConfig c;
        c.initial_c = initial_c;
        c.confidence_k = k;
        c.binary_search_steps = search_steps;
        c.inner_iterations = iterations;
        c.learning_rate = lr;
        c.with_pni_in_generation = noisy;
        Rng rng(seed);
        return batch_dict(cw_l2(model, to_tensor(x), labels, c, rng));
      },
      py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("initial_c") = 0.01, py::arg("confidence_k") = 0.0,
      py::arg("binary_search_steps") = 9, py::arg("inner_iterations") = 10, py::arg("learning_rate") = 5e-4,
      py::arg("noisy") = true, py::arg("seed") = 0);
  m.def(
      "zoo",
      [](const Model& model, const Array& x, const std::vector<int>& labels, std::size_t iterations,
         std::size_t coordinate_batch, double lr, double c, bool noisy, std::uint64_t seed) {
        ZooConfig z;
        z.iterations = iterations;
        z.coordinate_batch = coordinate_batch;
        z.learning_rate = lr;
        z.c = c;
        Rng query_rng(seed), rng = Rng(seed).derive(1);
        return batch_dict(zoo_attack(model_query(model, noisy, query_rng), to_tensor(x), labels, z, rng));
      },
      py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("iterations") = 100,
      py::arg("coordinate_batch") = 64, py::arg("learning_rate") = 0.01, py::arg("c") = 10.0, py::arg("noisy") = true,
      py::arg("seed") = 0);

  py::class_<TrainState>(m, "TrainState")
      .def_static("fresh", &TrainState::fresh, py::arg("model"), py::arg("seed") = 0)
      .def_readwrite("model", &TrainState::model)
      .def_readonly("epoch", &TrainState::epoch);
  m.def(
      "train",
      [](TrainState& state, const Dataset& data, std::size_t epochs, std::size_t batch_size, double lr, double w_c,
         double w_a, double epsilon, double step_size, std::size_t n_step, std::vector<std::size_t> decay_epochs) {
        TrainConfig c;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.lr.initial = lr;
        c.lr.decay_epochs = std::move(decay_epochs);
        c.w_c = w_c;
        c.w_a = w_a;
        c.attack.epsilon = epsilon;
        c.attack.step_size = step_size;
        c.attack.n_step = n_step;
        py::list out;
        for (const auto& s : train(state, data, c)) out.append(json_to_py(s.to_json()));
        return out;
      },
      py::arg("state"), py::arg("data"), py::arg("epochs") = 10, py::arg("batch_size") = 64, py::arg("lr") = 0.05,
      py::arg("w_c") = 0.5, py::arg("w_a") = 0.5, py::arg("epsilon") = 0.15, py::arg("step_size") = 0.0375,
      py::arg("n_step") = 7, py::arg("decay_epochs") = std::vector<std::size_t>{},
      "Runs epochs state.epoch .. epochs-1 and returns the per-epoch statistics.");
  m.def("save_checkpoint", &save_checkpoint, py::arg("state"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "eval_accuracy",
      [](const Model& model, const Dataset& data, const std::string& attack, double epsilon, double step_size,
         std::size_t n_step, std::size_t trials, bool noisy, std::uint64_t seed) {
        AttackConfig a;
        a.epsilon = epsilon;
        a.step_size = step_size;
        a.n_step = n_step;
        EvalOptions o;
        o.trials = trials;
        o.noise_at_test = noisy;
        o.seed = seed;
        return json_to_py(to_json(eval_accuracy(model, data, parse_attack_kind(attack), a, o)));
      },
      py::arg("model"), py::arg("data"), py::arg("attack") = "pgd", py::arg("epsilon") = 0.15,
      py::arg("step_size") = 0.015, py::arg("n_step") = 40, py::arg("trials") = 5, py::arg("noisy") = true,
      py::arg("seed") = 0, "Accuracy in percent: {'mean', 'std', 'trials'}.");

  m.def(
      "run_experiment",
      [](const std::filesystem::path& config, std::optional<std::filesystem::path> output, bool quiet) {
        ExperimentConfig c = load_experiment_config(config);
        if (output) c.output_dir = *output;
        Log log;
        if (!quiet) log = [](const std::string& s) { py::print(s); };
        py::list out;
        for (const auto& r : run_experiment(c, log)) out.append(json_to_py(r));
        return out;
      },
      py::arg("config"), py::arg("output") = py::none(), py::arg("quiet") = true,
      "Trains and evaluates everything in a config file; returns the report records.");
}
