// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "oofkd/bench.hpp"
#include "oofkd/gbdt.hpp"
#include "oofkd/labeling.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/mlp.hpp"
#include "oofkd/synthetic.hpp"
#include "oofkd/teachers.hpp"

namespace oofkd {

struct DatasetSource {
  std::string name;
  std::string path;          // CSV file; empty when synthetic
  std::string label_column;  // empty: last column
  std::optional<MixtureSpec> synthetic;
  /// Fraction of training labels replaced by another class after the split.
  double train_label_noise = 0.0;
};

enum class StudentKind { Gbdt, Mlp };

struct StudentSpec {
  StudentKind kind = StudentKind::Gbdt;
  std::string name = "gbdt";
  GbdtConfig gbdt;
  MlpConfig mlp;
};

struct ExperimentConfig {
  std::vector<DatasetSource> datasets;
  std::vector<TeacherSpec> teachers;
  std::vector<std::vector<std::string>> teacher_sets;
  std::vector<StudentSpec> students;
  LossConfig loss;
  AnnotationConfig annotation;
  int folds = 5;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::string baseline = "baseline-gbdt-hard";
  std::string output_dir = "out";
  std::size_t threads = 1;
  bool bench_enabled = true;
  BenchConfig bench;
  std::map<std::string, double> external_teacher_latency_ms;

  void validate() const;
};

inline constexpr const char* kHardBaseline = "baseline-gbdt-hard";

inline std::string teacher_set_name(const std::vector<std::string>& members) {
  std::string s = "[";
  for (std::size_t i = 0; i < members.size(); ++i) s += (i ? "+" : "") + members[i];
  return s + "]";
}

inline std::string student_row_name(const std::string& teacher, const std::string& student) {
  return teacher + "->" + student;
}

/// Every model row an experiment with this config produces, in report order.
inline std::vector<std::string> model_row_names(const ExperimentConfig& cfg) {
  std::vector<std::string> out{kHardBaseline};
  for (const auto& t : cfg.teachers) {
    out.push_back("teacher-" + t.name);
    for (const auto& s : cfg.students) out.push_back(student_row_name(t.name, s.name));
  }
  for (const auto& set : cfg.teacher_sets)
    for (const auto& s : cfg.students) out.push_back(student_row_name(teacher_set_name(set), s.name));
  return out;
}

inline void ExperimentConfig::validate() const {
  if (datasets.empty()) throw ConfigError("config: no datasets");
  if (students.empty()) throw ConfigError("config: no students");
  if (folds < 2) throw ConfigError("config: folds must be >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("config: test_fraction must be in (0, 1)");
  if (threads < 1) throw ConfigError("config: threads must be >= 1");
  loss.validate();
  annotation.validate();
  std::set<std::string> names;
  for (const auto& d : datasets) {
    if (d.name.empty()) throw ConfigError("config: dataset without a name");
    if (!names.insert(d.name).second) throw ConfigError("config: duplicate dataset '" + d.name + "'");
    if (d.path.empty() == !d.synthetic) throw ConfigError("config: dataset '" + d.name + "' needs exactly one of path or synthetic");
    if (!(d.train_label_noise >= 0.0 && d.train_label_noise < 1.0)) throw ConfigError("config: train_label_noise must be in [0, 1)");
  }
  std::set<std::string> tnames;
  for (const auto& t : teachers) {
    if (t.name.empty() || t.name.find_first_of("[]+,") != std::string::npos) {
      throw ConfigError("config: bad teacher name '" + t.name + "'");
    }
    if (!tnames.insert(t.name).second) throw ConfigError("config: duplicate teacher '" + t.name + "'");
    if (t.kind == TeacherKind::Cache && t.cache_path.empty()) throw ConfigError("config: cache teacher '" + t.name + "' needs cache_path");
  }
  for (const auto& set : teacher_sets) {
    if (set.size() < 2) throw ConfigError("config: a teacher set needs at least two members");
    for (const auto& m : set)
      if (!tnames.count(m)) throw ConfigError("config: teacher set references unknown teacher '" + m + "'");
  }
  std::set<std::string> snames;
  for (const auto& s : students) {
    if (s.name.empty() || s.name.find_first_of("[]+,") != std::string::npos) {
      throw ConfigError("config: bad student name '" + s.name + "'");
    }
    if (!snames.insert(s.name).second) throw ConfigError("config: duplicate student '" + s.name + "'");
    if (s.kind == StudentKind::Gbdt) s.gbdt.validate();
    else s.mlp.validate();
  }
  const auto rows = model_row_names(*this);
  if (std::find(rows.begin(), rows.end(), baseline) == rows.end() || baseline.rfind("teacher-", 0) == 0) {
    throw ConfigError("config: baseline '" + baseline + "' is not a trained model");
  }
}

namespace detail {

using json = nlohmann::json;

class JsonReader {
 public:
  JsonReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline GbdtConfig parse_gbdt(JsonReader& r) {
  GbdtConfig g;
  r.get("n_rounds", g.n_rounds);
  r.get("max_depth", g.max_depth);
  r.get("learning_rate", g.learning_rate);
  r.get("patience", g.patience);
  r.get("val_fraction", g.val_fraction);
  r.get("min_samples_leaf", g.min_samples_leaf);
  r.get("histogram_bins", g.histogram_bins);
  r.get("use_sample_weights", g.use_sample_weights);
  return g;
}

inline MlpConfig parse_mlp(JsonReader& r) {
  MlpConfig m;
  std::string opt = "sgd";
  r.get("embedding_dim", m.embedding_dim);
  r.get("hidden_widths", m.hidden_widths);
  r.get("epochs", m.epochs);
  r.get("warmup_fraction", m.warmup_fraction);
  r.get("base_lr", m.base_lr);
  r.get("dropout", m.dropout);
  r.get("label_smoothing", m.label_smoothing);
  r.get("swa_fraction", m.swa_fraction);
  r.get("collapse_factor", m.collapse_factor);
  r.get("collapse_patience", m.collapse_patience);
  r.get("max_restarts", m.max_restarts);
  r.get("batch_size", m.batch_size);
  r.get("holdout_fraction", m.holdout_fraction);
  r.get("optimizer", opt);
  if (opt == "sgd") m.optimizer = Optimizer::Sgd;
  else if (opt == "adam") m.optimizer = Optimizer::Adam;
  else throw ConfigError("mlp optimizer must be 'sgd' or 'adam'");
  return m;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::JsonReader;
  ExperimentConfig cfg;
  JsonReader top(j, "config");
  top.get("seed", cfg.seed);
  top.get("folds", cfg.folds);
  top.get("test_fraction", cfg.test_fraction);
  top.get("baseline", cfg.baseline);
  top.get("output_dir", cfg.output_dir);
  top.get("threads", cfg.threads);
  top.get("external_teacher_latency_ms", cfg.external_teacher_latency_ms);

  if (top.has("datasets")) {
    for (const auto& dj : top.at("datasets")) {
      JsonReader r(dj, "datasets[]");
      DatasetSource d;
      r.get("name", d.name);
      r.get("path", d.path);
      r.get("label", d.label_column);
      r.get("train_label_noise", d.train_label_noise);
      if (r.has("synthetic")) {
        JsonReader s(r.at("synthetic"), "datasets[].synthetic");
        MixtureSpec m;
        m.name = d.name;
        s.get("n", m.n);
        s.get("d", m.d);
        s.get("classes", m.classes);
        s.get("separation", m.separation);
        s.get("label_noise", m.label_noise);
        s.get("seed", m.seed);
        s.finish();
        d.synthetic = m;
      }
      r.finish();
      cfg.datasets.push_back(std::move(d));
    }
  }

  if (top.has("teachers")) {
    for (const auto& tj : top.at("teachers")) {
      JsonReader r(tj, "teachers[]");
      TeacherSpec t;
      std::string kind = "knn", mode = "mixture";
      r.get("kind", kind);
      r.get("name", t.name);
      r.get("k", t.k);
      r.get("smoothing", t.smoothing);
      r.get("smoothing_mode", mode);
      r.get("l2", t.l2);
      r.get("max_iter", t.max_iter);
      r.get("step", t.step);
      r.get("tol", t.tol);
      r.get("cache_path", t.cache_path);
      r.finish();
      if (kind == "knn") t.kind = TeacherKind::Knn;
      else if (kind == "logistic") t.kind = TeacherKind::Logistic;
      else if (kind == "cache") t.kind = TeacherKind::Cache;
      else throw ConfigError("teacher kind must be knn, logistic or cache");
      if (mode == "mixture") t.smoothing_mode = Smoothing::Mixture;
      else if (mode == "laplace") t.smoothing_mode = Smoothing::Laplace;
      else throw ConfigError("smoothing_mode must be mixture or laplace");
      cfg.teachers.push_back(std::move(t));
    }
  }
  top.get("teacher_sets", cfg.teacher_sets);

  if (top.has("students")) {
    for (const auto& sj : top.at("students")) {
      JsonReader r(sj, "students[]");
      StudentSpec s;
      std::string kind = "gbdt";
      r.get("kind", kind);
      s.name = kind;
      r.get("name", s.name);
      if (kind == "gbdt") {
        s.kind = StudentKind::Gbdt;
        s.gbdt = detail::parse_gbdt(r);
      } else if (kind == "mlp") {
        s.kind = StudentKind::Mlp;
        s.mlp = detail::parse_mlp(r);
      } else {
        throw ConfigError("student kind must be gbdt or mlp");
      }
      r.finish();
      cfg.students.push_back(std::move(s));
    }
  }

  if (top.has("loss")) {
    JsonReader r(top.at("loss"), "loss");
    std::string red = "sum";
    r.get("alpha", cfg.loss.alpha);
    r.get("epsilon_floor", cfg.loss.epsilon_floor);
    r.get("reduction", red);
    r.finish();
    if (red == "sum") cfg.loss.reduction = Reduction::Sum;
    else if (red == "mean") cfg.loss.reduction = Reduction::Mean;
    else throw ConfigError("loss.reduction must be sum or mean");
  }
  if (top.has("annotation")) {
    JsonReader r(top.at("annotation"), "annotation");
    auto& a = cfg.annotation;
    r.get("t_min", a.t_min);
    r.get("t_max", a.t_max);
    r.get("mu", a.mu);
    r.get("sigma", a.sigma);
    r.get("adaptive_temperature", a.adaptive_temperature);
    r.get("fixed_temperature", a.fixed_temperature);
    r.get("confidence_weighting", a.confidence_weighting);
    r.finish();
  }
  if (top.has("bench")) {
    JsonReader r(top.at("bench"), "bench");
    r.get("enabled", cfg.bench_enabled);
    r.get("batch_size", cfg.bench.batch_size);
    r.get("warmup", cfg.bench.warmup);
    r.get("iters", cfg.bench.iters);
    r.get("pin_core", cfg.bench.pin_core);
    r.get("core", cfg.bench.core);
    r.finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

/// Reads a JSON config. OOFKD_OUTPUT_DIR, when set, overrides output_dir.
inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  auto cfg = parse_config(j);
  if (const char* env = std::getenv("OOFKD_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  return cfg;
}

}  // namespace oofkd
