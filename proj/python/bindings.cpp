#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cotforge/errors.hpp"
#include "cotforge/io.hpp"
#include "cotforge/mock_server.hpp"
#include "cotforge/pipeline.hpp"
#include "cotforge/record.hpp"
#include "cotforge/record_json.hpp"
#include "cotforge/reward.hpp"
#include "cotforge/sampler.hpp"

namespace py = pybind11;
using namespace cotforge;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; records and reports are small.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::handle& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::vector<CoTRecord> records_from_py(const py::list& records) {
  std::vector<CoTRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(record_from_json(from_py(r)));
  return out;
}

StudentProfile profile_from(const std::string& name, std::pair<double, double> cd,
                            std::pair<double, double> rv, long long target_size) {
  return {name, {cd.first, cd.second}, {rv.first, rv.second}, target_size};
}

std::set<Difficulty> difficulties(const std::vector<std::string>& names) {
  std::set<Difficulty> out;
  for (const auto& n : names) {
    auto d = parse_difficulty(n);
    if (!d) throw ContractError("unknown difficulty \"" + n + "\"");
    out.insert(*d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Chain-of-thought distillation data pipeline: rewards, records, sampling, pipeline runs.";

  auto contract = py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", contract.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", contract.ptr());
  py::register_exception<pipeline::ConfigError>(m, "ConfigError", PyExc_ValueError);
  auto stage_failure = py::register_exception<pipeline::DependencyError>(m, "DependencyError", PyExc_RuntimeError);
  py::register_exception<sampler::EmptySelectionError>(m, "EmptySelectionError", stage_failure.ptr());
  py::register_exception<sampler::EmptyPhaseError>(m, "EmptyPhaseError", stage_failure.ptr());
  py::register_exception<gateway::TransportError>(m, "TransportError", stage_failure.ptr());

  py::class_<reward::RewardConfig>(m, "RewardConfig")
      .def(py::init([](double low_rv, double high_rv, double low_cd, double high_cd, double lambda_rv,
                       double lambda_cd) {
             reward::RewardConfig c{low_rv, high_rv, low_cd, high_cd, lambda_rv, lambda_cd};
             c.validate();
             return c;
           }),
           py::arg("low_rv") = 0.0, py::arg("high_rv") = 1.0, py::arg("low_cd") = 0.0, py::arg("high_cd") = 1.0,
           py::arg("lambda_rv") = 1.0, py::arg("lambda_cd") = 1.0)
      .def_readwrite("low_rv", &reward::RewardConfig::low_rv)
      .def_readwrite("high_rv", &reward::RewardConfig::high_rv)
      .def_readwrite("low_cd", &reward::RewardConfig::low_cd)
      .def_readwrite("high_cd", &reward::RewardConfig::high_cd)
      .def_readwrite("lambda_rv", &reward::RewardConfig::lambda_rv)
      .def_readwrite("lambda_cd", &reward::RewardConfig::lambda_cd);

  m.def("clip", &reward::clip, py::arg("value"), py::arg("lo"), py::arg("hi"));
  m.def("reward_rv", &reward::reward_rv, py::arg("f_rv"), py::arg("lo"), py::arg("hi"));
  m.def("reward_cd", &reward::reward_cd, py::arg("f_cd"), py::arg("lo"), py::arg("hi"));
  m.def(
      "total_reward",
      [](double r_fmt, double r_acc, double f_rv, double f_cd, const reward::RewardConfig& cfg) {
        auto b = reward::total_reward(r_fmt, r_acc, f_rv, f_cd, cfg);
        py::dict d;
        d["r_fmt"] = b.r_fmt;
        d["r_acc"] = b.r_acc;
        d["r_rv"] = b.r_rv;
        d["r_cd"] = b.r_cd;
        d["total"] = b.total;
        return d;
      },
      py::arg("r_fmt"), py::arg("r_acc"), py::arg("f_rv"), py::arg("f_cd"), py::arg("config"));
  m.def(
      "group_advantages", [](const std::vector<double>& r) { return reward::group_advantages(r); },
      py::arg("rewards"));
  m.def("pass_at_k", &reward::pass_at_k, py::arg("n"), py::arg("c"), py::arg("k"));
  m.def("format_reward", &reward::format_reward, py::arg("completion"));
  m.def("accuracy_reward", &reward::accuracy_reward, py::arg("answer"), py::arg("reference"));

  m.def(
      "parse_record", [](const std::string& line) { return to_py(to_json_value(parse_record(line))); },
      py::arg("line"), "Parse and validate one JSONL record line into a dict.");
  m.def(
      "serialize_record", [](const py::object& record) { return serialize_record(record_from_json(from_py(record))); },
      py::arg("record"), "Canonical JSONL line for a record dict.");
  m.def(
      "read_records",
      [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& f : expand_inputs(path)) {
          for (const auto& r : read_records(f.string())) out.append(to_py(to_json_value(r)));
        }
        return out;
      },
      py::arg("path"), "Records from a shard file or every shard in a directory.");
  m.def("sha256_hex", &sha256_hex, py::arg("data"));

  m.def(
      "content_hash", [](std::vector<std::string> ids) { return sampler::content_hash(std::move(ids)); },
      py::arg("ids"));
  m.def(
      "task_rebalance",
      [](const py::list& records, std::optional<std::map<std::string, long long>> quota, std::uint64_t seed) {
        auto rs = records_from_py(records);
        auto policy = sampler::RebalancePolicy::uniform();
        if (quota) {
          std::map<TaskDomain, long long> q;
          for (const auto& [k, v] : *quota) {
            auto d = parse_task_domain(k);
            if (!d) throw ContractError("unknown task domain \"" + k + "\"");
            q[*d] = v;
          }
          policy = sampler::RebalancePolicy::with_quota(std::move(q));
        }
        py::list out;
        for (const auto& r : sampler::task_rebalance(rs, policy, seed)) out.append(to_py(to_json_value(r)));
        return out;
      },
      py::arg("records"), py::arg("quota") = py::none(), py::arg("seed") = 0);
  m.def(
      "target_aware_sample",
      [](const py::list& records, const std::string& name, std::pair<double, double> cd_window,
         std::pair<double, double> rv_window, long long target_size, std::uint64_t seed) {
        auto rs = records_from_py(records);
        return to_py(sampler::target_aware_sample(rs, profile_from(name, cd_window, rv_window, target_size), seed)
                         .to_json());
      },
      py::arg("records"), py::arg("profile"), py::arg("cd_window"), py::arg("rv_window"),
      py::arg("target_size"), py::arg("seed") = 0);
  m.def(
      "build_curriculum",
      [](const py::list& records, std::optional<std::vector<std::pair<std::vector<std::string>, int>>> schedule,
         std::uint64_t seed) {
        auto rs = records_from_py(records);
        std::vector<sampler::ScheduleEntry> entries = sampler::default_schedule();
        if (schedule) {
          entries.clear();
          for (const auto& [names, epochs] : *schedule) entries.push_back({difficulties(names), epochs});
        }
        py::list out;
        for (const auto& p : sampler::build_curriculum(rs, entries, seed)) out.append(to_py(p.manifest.to_json()));
        return out;
      },
      py::arg("records"), py::arg("schedule") = py::none(), py::arg("seed") = 0);
  m.def(
      "length_report",
      [](const py::list& records, const std::string& by) {
        auto bucket = sampler::parse_length_bucket(by);
        if (!bucket) throw ContractError("unknown bucket \"" + by + "\"");
        auto rs = records_from_py(records);
        return sampler::format_length_report(sampler::length_report(rs, *bucket));
      },
      py::arg("records"), py::arg("by") = "all");

  py::class_<mock::MockTeacherServer>(m, "MockTeacherServer")
      .def(py::init([](const py::object& scenario, int threads) {
             return std::make_unique<mock::MockTeacherServer>(mock::Scenario::from_json(from_py(scenario)), threads);
           }),
           py::arg("scenario"), py::arg("threads") = 16)
      .def("start", &mock::MockTeacherServer::start, py::arg("host") = "127.0.0.1", py::arg("port") = 0)
      .def("stop", &mock::MockTeacherServer::stop, py::call_guard<py::gil_scoped_release>())
      .def("base_url", &mock::MockTeacherServer::base_url, py::arg("node") = "")
      .def_property_readonly("port", &mock::MockTeacherServer::port)
      .def("stats", [](const mock::MockTeacherServer& s) { return to_py(s.stats().to_json()); })
      .def("reset_stats", &mock::MockTeacherServer::reset_stats);

  m.def(
      "run_all",
      [](const std::filesystem::path& config, std::optional<long long> max_records) {
        json report;
        {
          py::gil_scoped_release release;
          pipeline::Pipeline p(pipeline::PipelineConfig::load(config));
          report = p.run_all({max_records}).to_json();
        }
        return to_py(report);
      },
      py::arg("config"), py::arg("max_records") = py::none(), "Run every configured stage; returns the report.");
  m.def(
      "run_stage",
      [](const std::filesystem::path& config, const std::string& stage, const std::filesystem::path& in,
         const std::filesystem::path& out, std::optional<long long> max_records) {
        auto s = pipeline::parse_stage(stage);
        if (!s) throw pipeline::ConfigError("unknown stage \"" + stage + "\"");
        json report;
        {
          py::gil_scoped_release release;
          pipeline::Pipeline p(pipeline::PipelineConfig::load(config));
          report = p.run_stage(*s, in, out, {max_records}).to_json();
        }
        return to_py(report);
      },
      py::arg("config"), py::arg("stage"), py::arg("input"), py::arg("output"), py::arg("max_records") = py::none());
}
