#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "eduloop/becat.hpp"
#include "eduloop/cli.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/feedback.hpp"
#include "eduloop/ncd.hpp"
#include "eduloop/session_service.hpp"
#include "eduloop/simulation.hpp"

namespace py = pybind11;
using namespace eduloop;
using nlohmann::json;

namespace {

json to_json_value(const py::handle& obj) {
  const auto dumps = py::module_::import("json").attr("dumps");
  return json::parse(dumps(obj).cast<std::string>());
}

py::object to_python(const json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

std::vector<double> theta_of(const ncd::NcdModel& model, int student) {
  const auto row = model.theta_row(student);
  return {row.begin(), row.end()};
}

ResponseDataset dataset_from(const DataBundle& data, const std::vector<ResponseRecord>& records) {
  ResponseDataset d;
  d.records = records;
  d.n_students = data.dataset.n_students;
  d.n_items = data.dataset.n_items;
  d.n_knowledge = data.dataset.n_knowledge;
  return d;
}

becat::SimulationConfig simulation_config(const py::dict& opts) {
  becat::SimulationConfig c;
  const auto doc = to_json_value(opts);
  if (doc.contains("policies")) {
    c.policies.clear();
    for (const auto& p : doc.at("policies")) {
      c.policies.push_back(becat::policy_from_string(p.get<std::string>()));
    }
  }
  c.n_students = doc.value("n_students", c.n_students);
  c.budget = doc.value("budget", c.budget);
  c.seed = doc.value("seed", c.seed);
  c.min_held_out = doc.value("min_held_out", c.min_held_out);
  if (doc.value("pool", std::string("held_out")) == "all") c.pool = becat::PoolScope::all;
  c.selection.lambda_mix = doc.value("lambda_mix", c.selection.lambda_mix);
  c.selection.learning_rate = doc.value("ability_lr", c.selection.learning_rate);
  c.selection.n_samples = doc.value("n_samples", c.selection.n_samples);
  c.selection.threshold = doc.value("threshold", c.selection.threshold);
  return c;
}

}  // namespace

PYBIND11_MODULE(_eduloop, m) {
  m.doc() = "Closed-loop diagnosis, adaptive item selection and feedback";

  static py::handle error_type = py::exception<Error>(m, "EduloopError").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("kind") = to_string(e.kind());
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  py::class_<ResponseRecord>(m, "ResponseRecord")
      .def(py::init<>())
      .def(py::init([](int s, int i, int c, std::int64_t o) { return ResponseRecord{s, i, c, o}; }),
           py::arg("student"), py::arg("item"), py::arg("correct"), py::arg("order") = 0)
      .def_readwrite("student", &ResponseRecord::student)
      .def_readwrite("item", &ResponseRecord::item)
      .def_readwrite("correct", &ResponseRecord::correct)
      .def_readwrite("order", &ResponseRecord::order)
      .def("__repr__", [](const ResponseRecord& r) {
        std::ostringstream os;
        os << "ResponseRecord(student=" << r.student << ", item=" << r.item
           << ", correct=" << r.correct << ", order=" << r.order << ")";
        return os.str();
      });

  py::class_<DataBundle>(m, "Data")
      .def_property_readonly("n_students", [](const DataBundle& d) { return d.dataset.n_students; })
      .def_property_readonly("n_items", [](const DataBundle& d) { return d.dataset.n_items; })
      .def_property_readonly("n_knowledge", [](const DataBundle& d) { return d.dataset.n_knowledge; })
      .def_property_readonly("records", [](const DataBundle& d) { return d.dataset.records; })
      .def_property_readonly("q_matrix", [](const DataBundle& d) { return d.q_matrix.rows; })
      .def_property_readonly("student_ids", [](const DataBundle& d) { return d.maps.students.raw_ids(); })
      .def_property_readonly("item_ids", [](const DataBundle& d) { return d.maps.items.raw_ids(); })
      .def_property_readonly("knowledge_ids", [](const DataBundle& d) { return d.maps.knowledge.raw_ids(); })
      .def_property_readonly("knowledge_names", [](const DataBundle& d) { return d.maps.knowledge_names; })
      .def_property_readonly("item_texts", [](const DataBundle& d) { return d.maps.item_texts; })
      .def_property_readonly("edges", [](const DataBundle& d) {
        std::vector<std::pair<int, int>> out;
        for (const auto& e : d.graph.edges) out.emplace_back(e.src, e.dst);
        return out;
      })
      .def("student_index", [](const DataBundle& d, const std::string& raw) { return d.maps.students.at(raw); })
      .def("item_index", [](const DataBundle& d, const std::string& raw) { return d.maps.items.at(raw); });

  m.def("load_data", &load_canonical, py::arg("path"), "Reads a canonical data directory.");

  m.def("split", [](const DataBundle& data, double test_fraction, std::uint64_t seed) {
          const auto s = split_dataset(data.dataset, test_fraction, seed);
          return py::make_tuple(s.train.records, s.test.records);
        },
        py::arg("data"), py::arg("test_fraction") = 0.2, py::arg("seed") = 0,
        "Per-student chronological split; returns (train, test) record lists.");

  py::class_<ncd::NcdModel, std::shared_ptr<ncd::NcdModel>>(m, "Model")
      .def_readonly("n_students", &ncd::NcdModel::n_students)
      .def_readonly("n_items", &ncd::NcdModel::n_items)
      .def_readonly("n_knowledge", &ncd::NcdModel::n_knowledge)
      .def("theta", &theta_of, py::arg("student"))
      .def("predict", [](const ncd::NcdModel& model, const DataBundle& data, int student, int item) {
             return ncd::predict(model, student, item, data.q_matrix.row(item));
           },
           py::arg("data"), py::arg("student"), py::arg("item"))
      .def("mastery", [](const ncd::NcdModel& model) { return to_array(ncd::mastery_table(model)); })
      .def("save", [](const ncd::NcdModel& model, const std::filesystem::path& path) {
             ncd::save_model(model, path);
           })
      .def("to_dict", [](const ncd::NcdModel& model) { return to_python(ncd::to_json(model)); });

  m.def("load_model", [](const std::filesystem::path& path) {
    return std::make_shared<ncd::NcdModel>(ncd::load_model(path));
  });

  m.def("fit",
        [](const DataBundle& data, const std::vector<ResponseRecord>& train,
           const std::vector<ResponseRecord>& valid, const py::dict& config) {
          const auto cfg = ncd::train_config_from_json(to_json_value(config));
          auto result = [&] {
            py::gil_scoped_release release;
            return ncd::fit(dataset_from(data, train), dataset_from(data, valid), data.q_matrix, cfg);
          }();
          return py::make_tuple(std::make_shared<ncd::NcdModel>(std::move(result.model)),
                                to_python(ncd::to_json(result.history)));
        },
        py::arg("data"), py::arg("train"), py::arg("valid"), py::arg("config") = py::dict(),
        "Trains a model; returns (model, history).");

  m.def("evaluate", [](const ncd::NcdModel& model, const DataBundle& data,
                       const std::vector<ResponseRecord>& records) {
          return to_python(ncd::to_json(ncd::evaluate(model, dataset_from(data, records), data.q_matrix)));
        });

  m.def("metrics", [](const std::vector<double>& predictions, const std::vector<int>& labels) {
    return to_python(ncd::to_json(ncd::compute_metrics(predictions, labels)));
  });

  m.def("bce_loss", [](const std::vector<double>& predictions, const std::vector<int>& labels) {
    return ncd::bce_loss(predictions, labels);
  });

  m.def("grad_check", [](const ncd::NcdModel& model, const DataBundle& data,
                         const std::vector<ResponseRecord>& sample, double epsilon) {
          return ncd::grad_check(model, sample, data.q_matrix, epsilon);
        },
        py::arg("model"), py::arg("data"), py::arg("sample"), py::arg("epsilon") = 1e-5);

  m.def("expected_model_change",
        [](const ncd::NcdModel& model, const DataBundle& data, int student, int item, double lr) {
          return becat::expected_model_change(model, student, item, data.q_matrix.row(item), lr);
        },
        py::arg("model"), py::arg("data"), py::arg("student"), py::arg("item"), py::arg("lr") = 0.1);

  m.def("weight_matrix",
        [](const ncd::NcdModel& model, const DataBundle& data, int student,
           const std::vector<int>& candidates, int n_samples, std::uint64_t seed) {
          const auto w = becat::weight_matrix(model, theta_of(model, student), candidates,
                                              data.q_matrix, n_samples, seed);
          return py::make_tuple(to_array(w.w), w.c);
        },
        py::arg("model"), py::arg("data"), py::arg("student"), py::arg("candidates"),
        py::arg("n_samples") = 16, py::arg("seed") = 0, "Returns (W, C).");

  m.def("info_score", [](py::array_t<double> w, const std::vector<int>& selected) {
    becat::WeightMatrix wm;
    const auto n = static_cast<std::size_t>(w.shape(0));
    wm.w = Matrix(n, n);
    std::copy(w.data(), w.data() + n * n, wm.w.data.begin());
    for (std::size_t i = 0; i < n; ++i) wm.candidate_ids.push_back(static_cast<int>(i));
    return becat::info_score(wm, selected);
  }, py::arg("w"), py::arg("selected"), "F(S) over positions 0..n-1 of a square W.");

  m.def("filter_candidates",
        [](const DataBundle& data, const std::vector<double>& mastery, double threshold,
           const std::vector<int>& pool) {
          return becat::filter_candidates(data.q_matrix, data.graph, mastery, threshold, pool);
        });

  m.def("recommend",
        [](const ncd::NcdModel& model, const DataBundle& data, int student, int budget,
           double lambda_mix, std::uint64_t seed) {
          becat::SelectionConfig cfg;
          cfg.budget = budget;
          cfg.lambda_mix = lambda_mix;
          cfg.seed = seed;
          auto theta = theta_of(model, student);
          std::vector<double> mastery;
          for (double t : theta) mastery.push_back(sigmoid(t));
          std::vector<int> all(static_cast<std::size_t>(model.n_items));
          for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
          const auto pool = becat::filter_candidates(data.q_matrix, data.graph, mastery, cfg.threshold, all);
          auto state = becat::start_selection(model, data.q_matrix, theta, pool, cfg);
          std::vector<int> out;
          while (!state.exhausted()) out.push_back(becat::select_next(model, data.q_matrix, state).item);
          return out;
        },
        py::arg("model"), py::arg("data"), py::arg("student"), py::arg("budget") = 10,
        py::arg("lambda_mix") = 0.5, py::arg("seed") = 0,
        "Greedy selection with no observed answers; returns dense item ids.");

  m.def("simulate",
        [](const ncd::NcdModel& model, const DataBundle& data,
           const std::vector<ResponseRecord>& held_out, const py::dict& options) {
          const auto cfg = simulation_config(options);
          json doc;
          {
            py::gil_scoped_release release;
            doc = becat::to_json(becat::simulate(model, data, dataset_from(data, held_out), cfg), cfg,
                                 data.maps);
          }
          return to_python(doc);
        },
        py::arg("model"), py::arg("data"), py::arg("held_out"), py::arg("options") = py::dict());

  m.def("sign_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto t = becat::sign_test(a, b);
    py::dict d;
    d["wins"] = t.wins;
    d["losses"] = t.losses;
    d["ties"] = t.ties;
    d["p_value"] = t.p_value;
    return d;
  });

  m.def("build_prompt",
        [](const DataBundle& data, const std::vector<double>& mastery, const std::vector<int>& items,
           std::size_t cap) {
          const auto p = feedback::build_prompt(mastery, data.maps, items, data.q_matrix, cap);
          py::dict d;
          d["fixed_part"] = p.fixed_part;
          d["dynamic_part"] = p.dynamic_part;
          d["rendered"] = p.rendered;
          d["truncated_items"] = p.truncated_items;
          return d;
        },
        py::arg("data"), py::arg("mastery"), py::arg("items"),
        py::arg("cap") = feedback::kDefaultPromptCap);

  m.def("parse_feedback", [](const std::string& text) -> py::object {
    const auto r = feedback::parse_feedback(text);
    if (!r) return py::none();
    return to_python(feedback::to_json(*r));
  }, "Returns the report as a dict, or None when the text does not parse.");

  m.def("fallback_feedback",
        [](const DataBundle& data, const std::vector<double>& mastery, const std::vector<int>& items,
           double threshold) {
          return to_python(feedback::to_json(
              feedback::fallback_feedback(mastery, data.maps, items, data.q_matrix, threshold)));
        },
        py::arg("data"), py::arg("mastery"), py::arg("items"), py::arg("threshold") = 0.6);

  py::class_<service::SessionService>(m, "SessionService")
      .def(py::init([](std::shared_ptr<ncd::NcdModel> model, const DataBundle& data,
                       const std::filesystem::path& sessions_dir, std::uint64_t seed,
                       const std::string& token_env) {
             service::ServiceConfig cfg;
             cfg.sessions_dir = sessions_dir;
             cfg.selection.seed = seed;
             cfg.provider.token_env = token_env;
             return std::make_unique<service::SessionService>(std::move(model), data, cfg);
           }),
           py::arg("model"), py::arg("data"), py::arg("sessions_dir"), py::arg("seed") = 0,
           py::arg("token_env") = "EDULOOP_LLM_TOKEN")
      .def("create_session", [](service::SessionService& s, const py::dict& req) {
        return to_python(s.create_session(to_json_value(req)));
      }, py::arg("request") = py::dict())
      .def("get_session", [](service::SessionService& s, const std::string& id) {
        return to_python(s.get_session(id));
      })
      .def("next_item", [](service::SessionService& s, const std::string& id) {
        return to_python(s.next_item(id));
      })
      .def("submit_response", [](service::SessionService& s, const std::string& id,
                                 const std::string& item_id, int correct) {
        return to_python(s.submit_response(id, {{"item_id", item_id}, {"correct", correct}}));
      })
      .def("mastery", [](service::SessionService& s, const std::string& id) {
        return to_python(s.mastery(id));
      })
      .def("get_feedback", [](service::SessionService& s, const std::string& id) {
        py::gil_scoped_release release;
        auto doc = s.get_feedback(id);
        py::gil_scoped_acquire acquire;
        return to_python(doc);
      })
      .def("close_session", [](service::SessionService& s, const std::string& id) {
        return to_python(s.close_session(id));
      });

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, "Runs the eduloop command line; returns (exit_code, stdout, stderr).");
}
