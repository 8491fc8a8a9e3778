#include <sstream>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "decodekit/cli.hpp"
#include "decodekit/decoding.hpp"
#include "decodekit/harness.hpp"
#include "decodekit/metrics.hpp"
#include "decodekit/remote.hpp"

namespace py = pybind11;
namespace dk = decodekit;

namespace {

// Exception classes live on the module so the translator can reach them.
PyObject* g_error = nullptr;
PyObject* g_input = nullptr;
PyObject* g_transport = nullptr;
PyObject* g_protocol = nullptr;
PyObject* g_undefined = nullptr;
PyObject* g_generation = nullptr;

PyObject* class_for(dk::ErrorKind kind) {
    switch (kind) {
        case dk::ErrorKind::Input: return g_input;
        case dk::ErrorKind::Transport: return g_transport;
        case dk::ErrorKind::Protocol: return g_protocol;
        case dk::ErrorKind::Undefined: return g_undefined;
    }
    return g_error;
}

PyObject* new_exception(py::module_& m, const char* name, PyObject* base) {
    const std::string qualified = std::string("decodekit.") + name;
    PyObject* cls = PyErr_NewException(qualified.c_str(), base, nullptr);
    m.add_object(name, py::handle(cls));
    return cls;
}

std::vector<double> span_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

dk::DecodeSpec spec_from(const std::string& spec_json) {
    return dk::decode_spec_from_json(nlohmann::json::parse(spec_json));
}

/// Owns a model built from a JSON spec.
struct PyModel {
    std::unique_ptr<dk::LanguageModel> model;
};

}  // namespace

PYBIND11_MODULE(_decodekit, m) {
    m.doc() = "Decoding strategies and evaluation metrics for open-ended generation.";

    g_error = new_exception(m, "Error", PyExc_RuntimeError);
    g_input = new_exception(m, "InputError", g_error);
    g_transport = new_exception(m, "TransportError", g_error);
    g_protocol = new_exception(m, "ProtocolError", g_error);
    g_undefined = new_exception(m, "UndefinedResultError", g_error);
    g_generation = new_exception(m, "GenerationError", g_error);

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const dk::GenerationError& e) {
            // Carries the partial continuation and the kind of the underlying failure.
            py::object exc = py::reinterpret_borrow<py::object>(g_generation)(e.what());
            exc.attr("partial") = py::cast(e.partial_continuation());
            exc.attr("cause") = py::reinterpret_borrow<py::object>(class_for(e.kind()));
            PyErr_SetObject(g_generation, exc.ptr());
        } catch (const dk::Error& e) {
            PyErr_SetString(class_for(e.kind()), e.what());
        }
    });

    py::class_<PyModel>(m, "Model")
        .def_property_readonly("vocab_size", [](const PyModel& s) { return s.model->vocabulary().size; })
        .def_property_readonly("eod", [](const PyModel& s) { return s.model->vocabulary().eod; })
        .def_property_readonly("dim", [](const PyModel& s) { return s.model->representation_dim(); })
        .def(
            "step",
            [](const PyModel& s, const std::vector<dk::TokenId>& context) {
                const auto out = s.model->step(context);
                std::vector<std::vector<double>> reps;
                for (std::size_t i = 0; i < out.representations.rows(); ++i) {
                    reps.push_back(span_vec(out.representations.row(i)));
                }
                return py::make_tuple(out.distribution, reps);
            },
            py::arg("context"), "Next-token distribution and one representation per context token.")
        .def(
            "score",
            [](const PyModel& s, const std::vector<dk::TokenId>& prefix, const std::vector<dk::TokenId>& cont) {
                return s.model->score(prefix, cont).logprobs;
            },
            py::arg("prefix"), py::arg("continuation"))
        .def(
            "candidate_representation",
            [](const PyModel& s, const std::vector<dk::TokenId>& context, dk::TokenId candidate) {
                return s.model->candidate_representation(context, candidate);
            },
            py::arg("context"), py::arg("candidate"));

    m.def(
        "_load_model",
        [](const std::string& spec_json) { return PyModel{dk::load_model(nlohmann::json::parse(spec_json))}; },
        py::arg("spec_json"));

    // Single-step strategies
    m.def("greedy_step", [](const std::vector<double>& d) { return dk::greedy_step(d); }, py::arg("dist"));
    m.def(
        "topk_support", [](const std::vector<double>& d, std::size_t k) { return dk::topk_support(d, k); },
        py::arg("dist"), py::arg("k"));
    m.def(
        "nucleus_support", [](const std::vector<double>& d, double p) { return dk::nucleus_support(d, p); },
        py::arg("dist"), py::arg("p"));
    m.def(
        "typical_support", [](const std::vector<double>& d, double tau) { return dk::typical_support(d, tau); },
        py::arg("dist"), py::arg("tau"));
    m.def(
        "cd_candidate_set", [](const std::vector<double>& d, double alpha) { return dk::cd_candidate_set(d, alpha); },
        py::arg("expert_dist"), py::arg("alpha"));
    m.def(
        "cd_select",
        [](const std::vector<double>& e, const std::vector<double>& a, double alpha, double t) {
            return dk::cd_select(e, a, alpha, t);
        },
        py::arg("expert_dist"), py::arg("amateur_dist"), py::arg("alpha") = 0.1, py::arg("amateur_temperature") = 0.5);
    m.def(
        "cs_step",
        [](const PyModel& s, const std::vector<dk::TokenId>& ctx, std::size_t k, double alpha) {
            return dk::cs_step(*s.model, ctx, k, alpha);
        },
        py::arg("model"), py::arg("context"), py::arg("k") = 5, py::arg("alpha") = 0.6);
    m.def(
        "cd_step",
        [](const PyModel& e, const PyModel& a, const std::vector<dk::TokenId>& ctx, double alpha, double t) {
            return dk::cd_step(*e.model, *a.model, ctx, alpha, t);
        },
        py::arg("expert"), py::arg("amateur"), py::arg("context"), py::arg("alpha") = 0.1,
        py::arg("amateur_temperature") = 0.5);
    m.def(
        "cosine_similarity",
        [](const std::vector<double>& a, const std::vector<double>& b) { return dk::cosine_similarity(a, b); },
        py::arg("a"), py::arg("b"));

    m.def(
        "_generate",
        [](const PyModel& model, const std::vector<dk::TokenId>& prompt, const std::string& spec_json,
           std::size_t max_length, std::uint64_t seed, const PyModel* amateur) {
            const dk::TokenSequence p(model.model->vocabulary(), prompt);
            const dk::DecoderModels models{model.model.get(), amateur ? amateur->model.get() : nullptr};
            py::gil_scoped_release release;
            return dk::generate(models, p, spec_from(spec_json), max_length, seed).to_json().dump();
        },
        py::arg("model"), py::arg("prompt"), py::arg("spec_json"), py::arg("max_length"), py::arg("seed"),
        py::arg("amateur") = nullptr);

    // Metrics
    m.def(
        "rep_n", [](const std::vector<dk::TokenId>& t, std::size_t n) { return dk::rep_n(t, n); }, py::arg("tokens"),
        py::arg("n"));
    m.def(
        "_diversity", [](const std::vector<dk::TokenId>& t) { return dk::diversity(t).to_json().dump(); },
        py::arg("tokens"));
    m.def(
        "coherence",
        [](const PyModel& s, const std::vector<dk::TokenId>& prompt, const std::vector<dk::TokenId>& cont) {
            return dk::coherence(*s.model, prompt, cont).value;
        },
        py::arg("scorer"), py::arg("prompt"), py::arg("continuation"));
    m.def(
        "frontier_from_histograms",
        [](const std::vector<double>& p, const std::vector<double>& q, const std::vector<double>& w, double c) {
            return dk::frontier_from_histograms(p, q, w, c).value;
        },
        py::arg("p_hist"), py::arg("q_hist"), py::arg("interior_weights"), py::arg("scaling_constant") = 5.0);
    m.def(
        "frontier_score",
        [](const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q, std::size_t bins,
           double c, std::size_t grid, std::uint64_t seed) {
            dk::FrontierOptions o;
            o.num_bins = bins;
            o.scaling_constant = c;
            o.grid_points = grid;
            o.seed = seed;
            return dk::frontier_score(p, q, o).value;
        },
        py::arg("p_features"), py::arg("q_features"), py::arg("num_bins") = 16, py::arg("scaling_constant") = 5.0,
        py::arg("grid_points") = 25, py::arg("seed") = 0);
    m.def("interior_mixture_grid", &dk::interior_mixture_grid, py::arg("points"));
    m.def("binomial_two_sided_p", &dk::binomial_two_sided_p, py::arg("successes"), py::arg("trials"));
    m.def(
        "_sign_test", [](std::size_t a, std::size_t b, std::size_t n) { return dk::sign_test_counts(a, b, n).to_json().dump(); },
        py::arg("wins_a"), py::arg("wins_b"), py::arg("neutrals") = 0);

    // Harness
    m.def(
        "_run_benchmark",
        [](const std::string& config_path) {
            const auto cfg = dk::RunConfig::load(config_path);
            py::gil_scoped_release release;
            return dk::run_benchmark(cfg).report.dump();
        },
        py::arg("config_path"));
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out;
            std::ostringstream err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = dk::run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command line tool in-process; returns (exit_code, stdout, stderr).");

    m.attr("__version__") = dk::kToolVersion;
}
