// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oofkd/bench.hpp"
#include "oofkd/config.hpp"
#include "oofkd/data.hpp"
#include "oofkd/eval.hpp"
#include "oofkd/gbdt.hpp"
#include "oofkd/labeling.hpp"
#include "oofkd/mlp.hpp"
#include "oofkd/parallel.hpp"
#include "oofkd/synthetic.hpp"
#include "oofkd/teachers.hpp"

namespace oofkd {

/// A dataset after the train/test split, with the fold plan over its
/// training rows. Both halves carry row ids 0..n-1 of their own, so caches
/// written against the training half index it directly.
struct PreparedData {
  Dataset train;
  Dataset test;
  FoldPlan plan;
  std::uint64_t seed = 0;
};

inline std::uint64_t dataset_seed(const ExperimentConfig& cfg, const std::string& dataset) {
  return derive_seed(cfg.seed, name_tag(dataset));
}

inline std::uint64_t model_seed(std::uint64_t ds_seed, const std::string& model) {
  return derive_seed(ds_seed, name_tag(model));
}

inline Dataset load_source(const DatasetSource& src, int folds) {
  Dataset ds;
  if (src.synthetic) {
    ds = make_mixture(*src.synthetic);
  } else {
    LoadOptions opt;
    opt.label_column = src.label_column;
    opt.min_class_count = folds;
    ds = load_dataset(src.path, opt);
  }
  ds.name = src.name;
  return ds;
}

inline PreparedData prepare_dataset(const DatasetSource& src, const ExperimentConfig& cfg) {
  PreparedData p;
  p.seed = dataset_seed(cfg, src.name);
  const Dataset full = load_source(src, cfg.folds);
  auto [tr, te] = stratified_holdout(full.labels, cfg.test_fraction, derive_seed(p.seed, 0x7E57));
  p.train = subset(full, tr);
  p.test = subset(full, te);
  std::iota(p.train.row_ids.begin(), p.train.row_ids.end(), std::size_t{0});
  std::iota(p.test.row_ids.begin(), p.test.row_ids.end(), std::size_t{0});
  if (src.train_label_noise > 0.0) flip_labels(p.train, src.train_label_noise, derive_seed(p.seed, 0xF11B));
  p.plan = make_folds(p.train.labels, cfg.folds, derive_seed(p.seed, 0xF0));
  return p;
}

/// Substitutes `{dataset}` in a cache path.
inline std::string expand_cache_path(std::string path, const std::string& dataset) {
  const std::string key = "{dataset}";
  for (auto pos = path.find(key); pos != std::string::npos; pos = path.find(key, pos + dataset.size())) {
    path.replace(pos, key.size(), dataset);
  }
  return path;
}

struct StudentModel {
  StudentKind kind = StudentKind::Gbdt;
  TreeEnsemble gbdt;
  MlpModel mlp;

  Matrix predict(const Matrix& x) const { return kind == StudentKind::Gbdt ? predict_gbdt(gbdt, x) : predict_mlp(mlp, x); }
};

/// Fits one student on annotated labels for the training rows.
inline StudentModel train_student(const StudentSpec& spec, const Dataset& train, const SoftLabelSet& labels,
                                  const LossConfig& loss, std::uint64_t seed) {
  StudentModel m;
  m.kind = spec.kind;
  if (spec.kind == StudentKind::Gbdt) {
    GbdtConfig g = spec.gbdt;
    g.seed = seed;
    const Matrix z = soft_logit_targets(labels, loss, train.labels);
    std::vector<double> w = g.use_sample_weights ? labels.weight : std::vector<double>(train.size(), 1.0);
    m.gbdt = fit_gbdt(train.features, z, w, g, train.labels);
  } else {
    MlpConfig c = spec.mlp;
    c.seed = seed;
    m.mlp = fit_mlp(train.features, labels, train.labels, loss, c);
  }
  return m;
}

/// The hard-label reference: a GBDT fit on one-hot targets (alpha = 0).
inline StudentModel train_hard_baseline(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
  StudentSpec spec;
  for (const auto& s : cfg.students)
    if (s.kind == StudentKind::Gbdt) {
      spec = s;
      break;
    }
  spec.kind = StudentKind::Gbdt;
  LossConfig hard = cfg.loss;
  hard.alpha = 0.0;
  return train_student(spec, train, one_hot_labels(train.labels, train.n_classes), hard, seed);
}

enum class RowKind { Baseline, Teacher, Student };

inline const char* to_string(RowKind k) {
  switch (k) {
    case RowKind::Baseline: return "baseline";
    case RowKind::Teacher: return "teacher";
    case RowKind::Student: return "student";
  }
  return "?";
}

struct ModelOutcome {
  std::string model;
  RowKind kind = RowKind::Student;
  std::string teacher;  // teacher or teacher-set name for student rows
  bool multi_teacher = false;
  bool ok = true;
  std::string error;
  double auc = 0.0;
  double ece = 0.0;
  double log_loss = 0.0;
  std::string auc_source = "test";  // "oof" for cache teachers scored on training rows
  std::optional<double> teacher_auc;
  std::optional<double> label_entropy;  // mean entropy of the soft labels used
  std::optional<LatencySample> latency;
};

struct DatasetOutcome {
  std::string dataset;
  bool ok = true;
  std::string error;
  std::size_t n_features = 0, n_train = 0, n_test = 0;
  int n_classes = 0;
  std::vector<ModelOutcome> models;
};

struct ExperimentResult {
  std::vector<DatasetOutcome> datasets;
  std::vector<std::string> files;
  bool partial_failure() const {
    for (const auto& d : datasets) {
      if (!d.ok) return true;
      for (const auto& m : d.models)
        if (!m.ok) return true;
    }
    return false;
  }
};

namespace detail {

inline void score(ModelOutcome& row, const Matrix& probs, const Dataset& test) {
  row.auc = roc_auc(probs, test.labels);
  row.ece = ece(probs, test.labels);
  row.log_loss = log_loss(probs, test.labels);
}

inline void bench_row(ModelOutcome& row, const StudentModel& m, const Dataset& test, const ExperimentConfig& cfg) {
  if (!cfg.bench_enabled) return;
  const Matrix batch = make_batch(test.features, cfg.bench.batch_size);
  detail::CorePin pin(cfg.bench.pin_core, cfg.bench.core);
  row.latency = time_batch(test.name, batch, [&m](const Matrix& x) { return m.predict(x); }, cfg.bench);
}

inline void run_student_rows(DatasetOutcome& out, const ExperimentConfig& cfg, const PreparedData& p,
                             const std::string& teacher_name, bool multi, const SoftLabelSet& labels,
                             std::optional<double> teacher_auc) {
  for (const auto& s : cfg.students) {
    ModelOutcome row;
    row.model = student_row_name(teacher_name, s.name);
    row.kind = RowKind::Student;
    row.teacher = teacher_name;
    row.multi_teacher = multi;
    if (!multi) row.teacher_auc = teacher_auc;
    try {
      row.label_entropy = mean_entropy(labels);
      const auto m = train_student(s, p.train, labels, cfg.loss, model_seed(p.seed, row.model));
      score(row, m.predict(p.test.features), p.test);
      bench_row(row, m, p.test, cfg);
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    out.models.push_back(std::move(row));
  }
}

inline void fail_rows(DatasetOutcome& out, const ExperimentConfig& cfg, const std::string& teacher, bool multi,
                      const std::string& why) {
  for (const auto& s : cfg.students) {
    ModelOutcome row;
    row.model = student_row_name(teacher, s.name);
    row.teacher = teacher;
    row.multi_teacher = multi;
    row.ok = false;
    row.error = why;
    out.models.push_back(std::move(row));
  }
}

inline DatasetOutcome run_dataset(const ExperimentConfig& cfg, const DatasetSource& src) {
  DatasetOutcome out;
  out.dataset = src.name;
  PreparedData p;
  try {
    p = prepare_dataset(src, cfg);
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
    return out;
  }
  out.n_features = p.train.dim();
  out.n_train = p.train.size();
  out.n_test = p.test.size();
  out.n_classes = p.train.n_classes;

  {
    ModelOutcome row;
    row.model = kHardBaseline;
    row.kind = RowKind::Baseline;
    try {
      const auto m = train_hard_baseline(cfg, p.train, model_seed(p.seed, row.model));
      score(row, m.predict(p.test.features), p.test);
      bench_row(row, m, p.test, cfg);
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    out.models.push_back(std::move(row));
  }

  std::map<std::string, TeacherSpec> specs;
  for (auto t : cfg.teachers) {
    if (t.kind == TeacherKind::Cache) t.cache_path = expand_cache_path(t.cache_path, src.name);
    specs[t.name] = t;
  }

  for (const auto& t0 : cfg.teachers) {
    const TeacherSpec& t = specs[t0.name];
    ModelOutcome trow;
    trow.model = "teacher-" + t.name;
    trow.kind = RowKind::Teacher;
    trow.teacher = t.name;
    SoftLabelSet labels;
    try {
      const std::vector<TeacherSpec> one{t};
      labels = annotate(collect_oof(p.train, p.plan, one, model_seed(p.seed, "oof/" + t.name)), cfg.annotation,
                        p.train.n_classes);
      if (t.kind == TeacherKind::Cache) {
        trow.auc_source = "oof";
        trow.auc = roc_auc(labels.probs, p.train.labels);
        trow.ece = ece(labels.probs, p.train.labels);
        trow.log_loss = log_loss(labels.probs, p.train.labels);
      } else {
        const auto fitted = fit_teacher(t, p.train, model_seed(p.seed, trow.model));
        score(trow, predict_proba(fitted, p.test), p.test);
      }
      trow.label_entropy = mean_entropy(labels);
    } catch (const std::exception& e) {
      trow.ok = false;
      trow.error = e.what();
    }
    const bool teacher_ok = trow.ok;
    const std::optional<double> tauc = teacher_ok ? std::optional<double>(trow.auc) : std::nullopt;
    const std::string why = trow.error;
    out.models.push_back(std::move(trow));
    if (teacher_ok) run_student_rows(out, cfg, p, t.name, false, labels, tauc);
    else fail_rows(out, cfg, t.name, false, "teacher failed: " + why);
  }

  for (const auto& set : cfg.teacher_sets) {
    const std::string name = teacher_set_name(set);
    SoftLabelSet labels;
    try {
      std::vector<TeacherSpec> members;
      for (const auto& m : set) members.push_back(specs.at(m));
      labels = annotate(collect_oof(p.train, p.plan, members, model_seed(p.seed, "oof/" + name)), cfg.annotation,
                        p.train.n_classes);
    } catch (const std::exception& e) {
      fail_rows(out, cfg, name, true, std::string("labeling failed: ") + e.what());
      continue;
    }
    run_student_rows(out, cfg, p, name, true, labels, std::nullopt);
  }
  return out;
}

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else if (c == '\n' || c == '\r') out += ' ';
    else out += c;
  }
  return out + "\"";
}

inline void write_text(const std::filesystem::path& path, const std::string& text, std::vector<std::string>& files) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
  files.push_back(path.string());
}

}  // namespace detail

/// Per-model aggregate over datasets, the shape of the main comparison table.
struct SummaryRow {
  std::string model;
  RowKind kind = RowKind::Student;
  bool multi_teacher = false;
  int n_datasets = 0;
  double auc_mean = 0.0, auc_sd = 0.0;
  std::optional<double> retention;
  std::optional<WinRate> wins;
  std::optional<StatResult> wilcoxon;
};

inline std::vector<SummaryRow> summarize(const ExperimentResult& res, const ExperimentConfig& cfg) {
  std::vector<SummaryRow> rows;
  for (const auto& name : model_row_names(cfg)) {
    SummaryRow s;
    s.model = name;
    std::vector<double> aucs, rets, deltas;
    for (const auto& d : res.datasets) {
      const ModelOutcome* m = nullptr;
      const ModelOutcome* b = nullptr;
      for (const auto& r : d.models) {
        if (r.model == name) m = &r;
        if (r.model == cfg.baseline) b = &r;
      }
      if (!m || !m->ok) continue;
      s.kind = m->kind;
      s.multi_teacher = m->multi_teacher;
      aucs.push_back(m->auc);
      if (m->kind == RowKind::Student && !m->multi_teacher && m->teacher_auc) rets.push_back(retention(m->auc, *m->teacher_auc));
      if (b && b->ok && name != cfg.baseline && m->kind != RowKind::Teacher) deltas.push_back(m->auc - b->auc);
    }
    s.n_datasets = static_cast<int>(aucs.size());
    s.auc_mean = mean_of(aucs);
    s.auc_sd = sd_of(aucs);
    if (!rets.empty()) s.retention = mean_of(rets);
    if (!deltas.empty()) {
      s.wins = win_rate(deltas);
      try {
        s.wilcoxon = wilcoxon_signed_rank(deltas);
      } catch (const Error&) {
      }
    }
    rows.push_back(std::move(s));
  }
  return rows;
}

/// Writes the deterministic report files (and latency files when timed).
inline std::vector<std::string> write_reports(const ExperimentResult& res, const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  using detail::csv_field;
  using detail::fmt;
  using detail::fmt_g;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  std::vector<std::string> files;
  const auto summary = summarize(res, cfg);

  {
    std::ostringstream o;
    o << "dataset,model,kind,status,auc,auc_source,ece,log_loss,teacher_auc,retention,label_entropy,n_features,n_classes,"
         "n_train,n_test,error\n";
    for (const auto& d : res.datasets) {
      if (!d.ok) {
        o << csv_field(d.dataset) << ",,,error,,,,,,,,,,,," << csv_field(d.error) << '\n';
        continue;
      }
      for (const auto& m : d.models) {
        o << csv_field(d.dataset) << ',' << csv_field(m.model) << ',' << to_string(m.kind) << ','
          << (m.ok ? "ok" : "error") << ',';
        if (m.ok) {
          o << fmt(m.auc) << ',' << m.auc_source << ',' << fmt(m.ece) << ',' << fmt(m.log_loss) << ',';
          o << (m.teacher_auc ? fmt(*m.teacher_auc) : "") << ',';
          o << (m.teacher_auc && !m.multi_teacher ? fmt(retention(m.auc, *m.teacher_auc), 3) : "") << ',';
        } else {
          o << ",,,,,,";
        }
        o << (m.label_entropy ? fmt(*m.label_entropy) : "") << ',' << d.n_features << ',' << d.n_classes << ','
          << d.n_train << ',' << d.n_test << ',' << csv_field(m.error) << '\n';
      }
    }
    detail::write_text(dir / "results.csv", o.str(), files);
  }

  {
    std::ostringstream o;
    o << "model,kind,n_datasets,auc_mean,auc_sd,retention,win_rate,mean_win,mean_loss,wilcoxon_w,wilcoxon_p,"
         "wilcoxon_method\n";
    for (const auto& s : summary) {
      o << csv_field(s.model) << ',' << to_string(s.kind) << ',' << s.n_datasets << ',' << fmt(s.auc_mean) << ','
        << fmt(s.auc_sd) << ',' << (s.retention ? fmt(*s.retention, 3) : "") << ',';
      if (s.wins) o << fmt(s.wins->rate, 4) << ',' << fmt(s.wins->mean_win) << ',' << fmt(s.wins->mean_loss) << ',';
      else o << ",,,";
      if (s.wilcoxon) o << fmt_g(s.wilcoxon->statistic) << ',' << fmt_g(s.wilcoxon->p_value) << ',' << to_string(s.wilcoxon->method);
      else o << ",,";
      o << '\n';
    }
    detail::write_text(dir / "summary.csv", o.str(), files);
  }

  // Figure data: student / reference-teacher AUC per (dataset, pair), and
  // macro AUC with cross-dataset spread per configuration.
  {
    std::ostringstream o;
    o << "dataset,model,teacher,student_auc,teacher_auc,ratio\n";
    for (const auto& d : res.datasets)
      for (const auto& m : d.models)
        if (m.ok && m.kind == RowKind::Student && !m.multi_teacher && m.teacher_auc)
          o << csv_field(d.dataset) << ',' << csv_field(m.model) << ',' << csv_field(m.teacher) << ',' << fmt(m.auc)
            << ',' << fmt(*m.teacher_auc) << ',' << fmt(m.auc / *m.teacher_auc) << '\n';
    detail::write_text(dir / "figure_retention.csv", o.str(), files);
  }
  {
    std::ostringstream o;
    o << "model,n_datasets,auc_mean,auc_sd\n";
    for (const auto& s : summary) o << csv_field(s.model) << ',' << s.n_datasets << ',' << fmt(s.auc_mean) << ',' << fmt(s.auc_sd) << '\n';
    detail::write_text(dir / "figure_auc.csv", o.str(), files);
  }

  std::vector<MetricRow> metric_rows;
  for (const auto& d : res.datasets)
    for (const auto& m : d.models)
      if (m.ok) metric_rows.push_back({d.dataset, m.model, m.auc, m.ece, 0.0, d.n_features, m.teacher_auc});

  std::ostringstream split_csv;
  split_csv << "model,baseline,median_features,low_n,low_mean_delta,high_n,high_mean_delta\n";
  std::ostringstream split_md;
  for (const auto& s : summary) {
    if (s.kind != RowKind::Student) continue;
    try {
      const auto fs_ = feature_split_analysis(metric_rows, cfg.baseline, s.model);
      split_csv << csv_field(s.model) << ',' << csv_field(cfg.baseline) << ',' << fmt(fs_.median_features, 1) << ','
                << fs_.low_n << ',' << fmt(fs_.low_mean_delta) << ',' << fs_.high_n << ',' << fmt(fs_.high_mean_delta)
                << '\n';
      split_md << "| " << s.model << " | " << fmt(fs_.median_features, 1) << " | " << fs_.low_n << " | "
               << fmt(fs_.low_mean_delta, 4) << " | " << fs_.high_n << " | " << fmt(fs_.high_mean_delta, 4) << " |\n";
    } catch (const Error&) {
    }
  }
  detail::write_text(dir / "feature_split.csv", split_csv.str(), files);

  // Friedman over non-teacher models present on every dataset.
  std::vector<std::string> methods;
  for (const auto& s : summary) {
    if (s.kind == RowKind::Teacher) continue;
    if (s.n_datasets == static_cast<int>(res.datasets.size())) methods.push_back(s.model);
  }
  std::optional<StatResult> fr;
  if (methods.size() >= 2 && res.datasets.size() >= 2) {
    Matrix table(res.datasets.size(), methods.size());
    for (std::size_t i = 0; i < res.datasets.size(); ++i)
      for (std::size_t j = 0; j < methods.size(); ++j)
        for (const auto& m : res.datasets[i].models)
          if (m.model == methods[j]) table(i, j) = m.auc;
    fr = friedman(table);
  }

  {
    std::ostringstream o;
    o << "# Distillation report\n\n";
    o << "Datasets: " << res.datasets.size() << ". Folds: " << cfg.folds << ". Seed: " << cfg.seed
      << ". Baseline for win rate and Wilcoxon: `" << cfg.baseline << "`.\n\n";
    o << "## Macro summary\n\n";
    o << "| Model | n | AUC | s.d. | Ret. | Win | mean win | mean loss | Wilcoxon p |\n";
    o << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& s : summary) {
      o << "| " << s.model << " | " << s.n_datasets << " | " << fmt(s.auc_mean, 4) << " | " << fmt(s.auc_sd, 4) << " | "
        << (s.retention ? fmt(*s.retention, 1) + "%" : std::string("-")) << " | "
        << (s.wins ? fmt(100.0 * s.wins->rate, 1) + "%" : std::string("-")) << " | "
        << (s.wins ? fmt(s.wins->mean_win, 4) : std::string("-")) << " | "
        << (s.wins ? fmt(s.wins->mean_loss, 4) : std::string("-")) << " | "
        << (s.wilcoxon ? fmt_g(s.wilcoxon->p_value) : std::string("-")) << " |\n";
    }
    o << "\nRetention is student AUC over its own teacher's AUC; rows distilled from a teacher set leave it blank.\n";
    o << "\n## Per-dataset AUC\n\n| Dataset | d | Model | AUC | ECE |\n|---|---|---|---|---|\n";
    for (const auto& d : res.datasets) {
      if (!d.ok) {
        o << "| " << d.dataset << " | - | (dataset failed) | - | - |\n";
        continue;
      }
      for (const auto& m : d.models) {
        o << "| " << d.dataset << " | " << d.n_features << " | " << m.model << " | "
          << (m.ok ? fmt(m.auc, 4) + (m.auc_source == "oof" ? " (oof)" : "") : std::string("error")) << " | "
          << (m.ok ? fmt(m.ece, 4) : std::string("-")) << " |\n";
      }
    }
    o << "\n## Friedman test\n\n";
    if (fr) {
      o << "Methods: " << methods.size() << ", datasets: " << res.datasets.size() << ". chi2 = " << fmt(fr->statistic, 3)
        << ", p = " << fmt_g(fr->p_value) << ".\n";
    } else {
      o << "Not computed (needs at least 2 datasets and 2 complete methods).\n";
    }
    o << "\n## Feature-count split\n\n| Model | median d | n low | delta low | n high | delta high |\n|---|---|---|---|---|---|\n"
      << split_md.str();
    bool any_error = false;
    for (const auto& d : res.datasets) {
      if (!d.ok) any_error = true;
      for (const auto& m : d.models) any_error = any_error || !m.ok;
    }
    if (any_error) {
      o << "\n## Failures\n\n";
      for (const auto& d : res.datasets) {
        if (!d.ok) o << "- " << d.dataset << ": " << d.error << '\n';
        for (const auto& m : d.models)
          if (!m.ok) o << "- " << d.dataset << " / " << m.model << ": " << m.error << '\n';
      }
    }
    detail::write_text(dir / "report.md", o.str(), files);
  }

  if (cfg.bench_enabled) {
    std::ostringstream o;
    o << "dataset,model,mean_ms,min_ms,max_ms,inner_reps,batch_size,iters\n";
    std::map<std::string, std::vector<double>> per_model;
    std::vector<std::string> order;
    for (const auto& d : res.datasets)
      for (const auto& m : d.models)
        if (m.ok && m.latency) {
          o << csv_field(d.dataset) << ',' << csv_field(m.model) << ',' << fmt(m.latency->mean_ms, 4) << ','
            << fmt(m.latency->min_ms, 4) << ',' << fmt(m.latency->max_ms, 4) << ',' << m.latency->inner_reps << ','
            << cfg.bench.batch_size << ',' << cfg.bench.iters << '\n';
          if (!per_model.count(m.model)) order.push_back(m.model);
          per_model[m.model].push_back(m.latency->mean_ms);
        }
    detail::write_text(dir / "latency.csv", o.str(), files);
    std::ostringstream md;
    md << "# Latency\n\nSingle thread, batch of " << cfg.bench.batch_size << " rows, " << cfg.bench.warmup
       << " warmup and " << cfg.bench.iters << " timed batches per dataset.\n\n| Model | macro ms/batch |\n|---|---|\n";
    for (const auto& name : order) md << "| " << name << " | " << fmt(macro_mean(per_model[name]), 3) << " |\n";
    if (!cfg.external_teacher_latency_ms.empty()) {
      md << "\nTeacher latencies below are user-supplied, not measured here.\n\n| Teacher | teacher ms | Student | "
            "student ms | speedup |\n|---|---|---|---|---|\n";
      for (const auto& [teacher, tms] : cfg.external_teacher_latency_ms)
        for (const auto& name : order)
          if (name.rfind(teacher + "->", 0) == 0) {
            const double sms = macro_mean(per_model[name]);
            md << "| " << teacher << " | " << fmt(tms, 1) << " | " << name << " | " << fmt(sms, 3) << " | "
               << fmt(speedup(tms, sms), 1) << "x |\n";
          }
    }
    detail::write_text(dir / "latency.md", md.str(), files);
  }
  return files;
}

/// Runs the whole grid: per dataset split, OOF labels per teacher and teacher
/// set, annotation, students, scoring; then writes the reports. Datasets run
/// on up to cfg.threads workers; rows are seeded per (dataset, model) so the
/// output does not depend on the worker count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.datasets.resize(cfg.datasets.size());
  const std::size_t workers = cfg.bench_enabled ? 1 : cfg.threads;
  parallel_for(cfg.datasets.size(), workers,
               [&](std::size_t i) { res.datasets[i] = detail::run_dataset(cfg, cfg.datasets[i]); });
  res.files = write_reports(res, cfg);
  return res;
}

struct AblationVariant {
  std::string name;
  LossConfig loss;
  AnnotationConfig annotation;
};

/// The seven ablation rows in report order, derived from the base config.
inline std::vector<AblationVariant> ablation_variants(const LossConfig& loss, const AnnotationConfig& ann) {
  std::vector<AblationVariant> v;
  v.push_back({"full", loss, ann});
  auto hard = v[0];
  hard.name = "alpha=0 (hard labels)";
  hard.loss.alpha = 0.0;
  v.push_back(hard);
  auto soft = v[0];
  soft.name = "alpha=1 (soft only)";
  soft.loss.alpha = 1.0;
  v.push_back(soft);
  auto fixed = v[0];
  fixed.name = "fixed T";
  fixed.annotation.adaptive_temperature = false;
  v.push_back(fixed);
  auto unweighted = v[0];
  unweighted.name = "w=1";
  unweighted.annotation.confidence_weighting = false;
  v.push_back(unweighted);
  auto t1 = v[0];
  t1.name = "T_max=1";
  t1.annotation.t_max = 1.0;
  t1.annotation.t_min = 1.0;
  v.push_back(t1);
  auto t5 = v[0];
  t5.name = "T_max=5";
  t5.annotation.t_max = 5.0;
  v.push_back(t5);
  return v;
}

struct AblationRow {
  std::string name;
  std::vector<double> auc;    // per dataset, NaN on failure
  std::vector<double> delta;  // vs the full configuration
  std::optional<StatResult> wilcoxon;
  long kl_evaluations = 0;
  double min_temperature = 0.0, max_temperature = 0.0;
  std::vector<std::string> errors;
};

struct AblationResult {
  std::vector<std::string> datasets;
  std::vector<AblationRow> rows;
  std::vector<std::string> files;
  bool partial_failure() const {
    for (const auto& r : rows)
      if (!r.errors.empty()) return true;
    return false;
  }
};

/// Trains the first MLP student on OOF labels from the first teacher under
/// every ablation variant, per dataset. KL evaluations are counted per
/// variant on the training thread.
inline AblationResult run_ablation(const ExperimentConfig& cfg) {
  cfg.validate();
  const StudentSpec* mlp = nullptr;
  for (const auto& s : cfg.students)
    if (s.kind == StudentKind::Mlp) {
      mlp = &s;
      break;
    }
  if (!mlp) throw ConfigError("ablation needs an mlp student");
  if (cfg.teachers.empty()) throw ConfigError("ablation needs a teacher");
  const auto variants = ablation_variants(cfg.loss, cfg.annotation);
  AblationResult res;
  for (const auto& d : cfg.datasets) res.datasets.push_back(d.name);
  res.rows.resize(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    res.rows[v].name = variants[v].name;
    res.rows[v].auc.assign(cfg.datasets.size(), std::nan(""));
    res.rows[v].min_temperature = INFINITY;
    res.rows[v].max_temperature = -INFINITY;
  }

  struct Cell {
    double auc = std::nan("");
    long kl = 0;
    double tmin = INFINITY, tmax = -INFINITY;
    std::string error;
  };
  std::vector<std::vector<Cell>> cells(cfg.datasets.size(), std::vector<Cell>(variants.size()));
  parallel_for(cfg.datasets.size(), cfg.threads, [&](std::size_t i) {
    const auto& src = cfg.datasets[i];
    PreparedData p;
    SoftLabelSet raw;
    try {
      p = prepare_dataset(src, cfg);
      TeacherSpec t = cfg.teachers.front();
      if (t.kind == TeacherKind::Cache) t.cache_path = expand_cache_path(t.cache_path, src.name);
      const std::vector<TeacherSpec> one{t};
      raw = collect_oof(p.train, p.plan, one, model_seed(p.seed, "oof/" + t.name));
    } catch (const std::exception& e) {
      for (auto& c : cells[i]) c.error = src.name + ": " + e.what();
      return;
    }
    for (std::size_t v = 0; v < variants.size(); ++v) {
      Cell& c = cells[i][v];
      try {
        const auto labels = annotate(raw, variants[v].annotation, p.train.n_classes);
        for (double T : labels.temperature) {
          c.tmin = std::min(c.tmin, T);
          c.tmax = std::max(c.tmax, T);
        }
        const long before = kl_evaluations();
        const auto m = train_student(*mlp, p.train, labels, variants[v].loss, model_seed(p.seed, "ablation/" + mlp->name));
        c.kl = kl_evaluations() - before;
        c.auc = roc_auc(m.predict(p.test.features), p.test.labels);
      } catch (const std::exception& e) {
        c.error = src.name + ": " + e.what();
      }
    }
  });

  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto& row = res.rows[v];
    for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
      const Cell& c = cells[i][v];
      if (!c.error.empty()) row.errors.push_back(c.error);
      row.auc[i] = c.auc;
      row.kl_evaluations += c.kl;
      row.min_temperature = std::min(row.min_temperature, c.tmin);
      row.max_temperature = std::max(row.max_temperature, c.tmax);
    }
  }
  for (auto& row : res.rows) {
    std::vector<double> valid;
    for (std::size_t i = 0; i < row.auc.size(); ++i) {
      const double full = res.rows[0].auc[i];
      const double dlt = row.auc[i] - full;
      row.delta.push_back(dlt);
      if (std::isfinite(dlt)) valid.push_back(dlt);
    }
    try {
      row.wilcoxon = wilcoxon_signed_rank(valid);
    } catch (const Error&) {
    }
  }

  namespace fs = std::filesystem;
  using detail::fmt;
  using detail::fmt_g;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  {
    std::ostringstream o;
    o << "config,dataset,auc,delta_vs_full\n";
    for (const auto& row : res.rows)
      for (std::size_t i = 0; i < row.auc.size(); ++i)
        o << detail::csv_field(row.name) << ',' << detail::csv_field(res.datasets[i]) << ','
          << (std::isfinite(row.auc[i]) ? fmt(row.auc[i]) : "") << ','
          << (std::isfinite(row.delta[i]) ? fmt(row.delta[i]) : "") << '\n';
    detail::write_text(dir / "ablation.csv", o.str(), res.files);
  }
  {
    std::ostringstream o;
    o << "# Ablation\n\nStudent: `" << mlp->name << "`. Teacher: `" << cfg.teachers.front().name
      << "` (out-of-fold).\n\n| Config | AUC | delta | Wilcoxon p | KL evals | T range |\n|---|---|---|---|---|---|\n";
    for (const auto& row : res.rows) {
      std::vector<double> a, dl;
      for (std::size_t i = 0; i < row.auc.size(); ++i)
        if (std::isfinite(row.delta[i])) {
          a.push_back(row.auc[i]);
          dl.push_back(row.delta[i]);
        }
      o << "| " << row.name << " | " << fmt(mean_of(a), 4) << " | " << fmt(mean_of(dl), 4) << " | "
        << (row.wilcoxon ? fmt_g(row.wilcoxon->p_value) : std::string("-")) << " | " << row.kl_evaluations << " | "
        << (std::isfinite(row.min_temperature) ? fmt(row.min_temperature, 2) + "-" + fmt(row.max_temperature, 2)
                                               : std::string("-"))
        << " |\n";
    }
    detail::write_text(dir / "ablation.md", o.str(), res.files);
  }
  return res;
}

}  // namespace oofkd
