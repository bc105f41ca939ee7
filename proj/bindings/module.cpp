#include <cstring>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mpq/pipeline.hpp"

namespace py = pybind11;

namespace {

mpq::Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D float array");
    mpq::Matrix m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::memcpy(m.data.data(), a.data(), sizeof(double) * m.data.size());
    return m;
}

py::array_t<double> to_array(const mpq::Matrix& m) {
    py::array_t<double> a({m.rows, m.cols});
    std::memcpy(a.mutable_data(), m.data.data(), sizeof(double) * m.data.size());
    return a;
}

py::dict row_dict(const mpq::ExpectationRow& r) {
    py::dict d;
    d["bits"] = r.bits;
    d["e_xx"] = r.e_xx;
    d["e_xd"] = r.e_xd;
    d["e_dd"] = r.e_dd;
    return d;
}

py::dict alloc_dict(const mpq::Allocation& a) {
    py::dict d;
    d["bits"] = a.bits;
    d["objective"] = a.objective;
    d["avg_bits"] = a.avg_bits;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, mod) {
    mod.doc() = "mixed-precision post-training quantization laboratory (C++ core)";
    mod.attr("__version__") = "0.1.0";

    mod.def(
        "fake_quant",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, int bits,
           double r_min, double r_max) {
            mpq::QuantParams p = mpq::make_quant_params(bits, r_min, r_max);
            return to_array(mpq::fake_quant(to_matrix(x), p));
        },
        py::arg("x"), py::arg("bits"), py::arg("r_min"), py::arg("r_max"),
        "quantize-dequantize a 2-D array with the asymmetric uniform quantizer");

    mod.def(
        "gaussian_expectations",
        [](int bits, double clip) { return row_dict(mpq::gaussian_expectations(bits, clip)); },
        py::arg("bits"), py::arg("clip") = 3.0,
        "exact E[X*Delta] and E[Delta^2] of a clipped standard normal");

    mod.def(
        "recon_ratio_table",
        [](int b_min, int b_max, double clip) {
            mpq::ReconRatioTable t = mpq::recon_ratio_table(b_min, b_max, clip);
            py::list rows;
            for (const mpq::RatioRow& r : t.rows) {
                py::dict d;
                d["bits"] = r.bits;
                d["k"] = r.k;
                d["k_norm"] = r.k_norm;
                d["ratio"] = r.ratio;
                rows.append(d);
            }
            return rows;
        },
        py::arg("b_min") = 1, py::arg("b_max") = 8, py::arg("clip") = 3.0,
        "composite error factors k(B) with normalized values and per-bit ratios");

    mod.def(
        "reference_table",
        []() {
            py::list rows;
            for (const mpq::ReferenceEntry& e : mpq::reference_table()) {
                py::dict d;
                d["bits"] = e.bits;
                d["e_xd"] = e.e_xd;
                d["e_dd"] = e.e_dd;
                d["k_norm"] = e.k_norm;
                d["ratio"] = e.ratio;
                rows.append(d);
            }
            return rows;
        },
        "reference expectation values the implementation reproduces");

    mod.def(
        "solve_ilp",
        [](const std::vector<double>& omega, const std::vector<long long>& counts,
           const std::vector<int>& bit_set, const std::string& b_t, double gamma) {
            mpq::IlpInstance inst = mpq::make_instance(omega, counts, bit_set, b_t, gamma);
            return alloc_dict(mpq::solve_ilp(inst));
        },
        py::arg("omega"), py::arg("counts"), py::arg("bit_set"), py::arg("b_t") = "3",
        py::arg("gamma") = 6.0, "exact budgeted bit assignment");

    mod.def(
        "brute_force_alloc",
        [](const std::vector<double>& omega, const std::vector<long long>& counts,
           const std::vector<int>& bit_set, const std::string& b_t, double gamma) {
            mpq::IlpInstance inst = mpq::make_instance(omega, counts, bit_set, b_t, gamma);
            return alloc_dict(mpq::brute_force_alloc(inst));
        },
        py::arg("omega"), py::arg("counts"), py::arg("bit_set"), py::arg("b_t") = "3",
        py::arg("gamma") = 6.0, "exhaustive oracle for solve_ilp");

    mod.def(
        "spearman",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            return mpq::spearman(a, b);
        },
        py::arg("a"), py::arg("b"), "Spearman rank correlation with average ranks on ties");

    mod.def(
        "run_pipeline",
        [](const std::string& config_json) {
            nlohmann::json j = config_json.empty() ? nlohmann::json::object()
                                                   : nlohmann::json::parse(config_json);
            mpq::RunConfig cfg = mpq::config_from_json(j);
            return mpq::run_pipeline(cfg).dump(2);
        },
        py::arg("config_json") = std::string(),
        "full pipeline from a run_config/1 JSON string; returns the report JSON");

    mod.def(
        "default_config",
        []() { return mpq::config_to_json(mpq::RunConfig{}).dump(2); },
        "the default run_config/1 JSON");
}
