// SPDX-License-Identifier: Apache-2.0
// oofkd: command-line driver for out-of-fold distillation experiments.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "oofkd/oofkd.hpp"

namespace fs = std::filesystem;
using namespace oofkd;

namespace {

enum Exit { kOk = 0, kPartial = 1, kConfig = 2 };

const DatasetSource& find_dataset(const ExperimentConfig& cfg, const std::string& name) {
  if (name.empty()) return cfg.datasets.front();
  for (const auto& d : cfg.datasets)
    if (d.name == name) return d;
  throw ConfigError("no dataset named '" + name + "' in the config");
}

const TeacherSpec& find_teacher(const ExperimentConfig& cfg, const std::string& name) {
  if (cfg.teachers.empty()) throw ConfigError("the config has no teachers");
  if (name.empty()) return cfg.teachers.front();
  for (const auto& t : cfg.teachers)
    if (t.name == name) return t;
  throw ConfigError("no teacher named '" + name + "' in the config");
}

const StudentSpec& find_student(const ExperimentConfig& cfg, const std::string& name) {
  if (name.empty()) return cfg.students.front();
  for (const auto& s : cfg.students)
    if (s.name == name) return s;
  throw ConfigError("no student named '" + name + "' in the config");
}

std::string cache_file(const ExperimentConfig& cfg, const std::string& dataset, const std::string& teacher) {
  return (fs::path(cfg.output_dir) / "caches" / (dataset + "." + teacher + ".csv")).string();
}

StudentModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model '" + path + "'");
  std::string magic;
  in >> magic;
  in.seekg(0);
  StudentModel m;
  if (magic == kGbdtMagic) {
    m.kind = StudentKind::Gbdt;
    m.gbdt = load_gbdt(in);
  } else if (magic == kMlpMagic) {
    m.kind = StudentKind::Mlp;
    m.mlp = load_mlp(in);
  } else {
    throw Error("'" + path + "' is not a model file");
  }
  return m;
}

int cmd_split(const ExperimentConfig& cfg) {
  const fs::path dir = fs::path(cfg.output_dir) / "splits";
  fs::create_directories(dir);
  int rc = kOk;
  for (const auto& src : cfg.datasets) {
    try {
      const auto p = prepare_dataset(src, cfg);
      std::ofstream folds(dir / (src.name + ".folds.csv"));
      write_fold_plan(folds, p.plan, src.name);
      std::ofstream train(dir / (src.name + ".train.csv"));
      write_matrix(train, p.train);
      std::ofstream test(dir / (src.name + ".test.csv"));
      write_matrix(test, p.test);
      std::cout << src.name << ": n_train=" << p.train.size() << " n_test=" << p.test.size()
                << " fold_plan_hash=" << p.plan.hash_hex() << '\n';
    } catch (const std::exception& e) {
      std::cerr << src.name << ": " << e.what() << '\n';
      rc = kPartial;
    }
  }
  return rc;
}

int cmd_label(const ExperimentConfig& cfg) {
  int rc = kOk;
  fs::create_directories(fs::path(cfg.output_dir) / "caches");
  for (const auto& src : cfg.datasets) {
    PreparedData p;
    try {
      p = prepare_dataset(src, cfg);
    } catch (const std::exception& e) {
      std::cerr << src.name << ": " << e.what() << '\n';
      rc = kPartial;
      continue;
    }
    for (const auto& t : cfg.teachers) {
      if (t.kind == TeacherKind::Cache) continue;
      try {
        const std::vector<TeacherSpec> one{t};
        const auto labels = collect_oof(p.train, p.plan, one, model_seed(p.seed, "oof/" + t.name));
        const auto path = cache_file(cfg, src.name, t.name);
        write_cache_file(path, labels, p.plan, src.name, t.name);
        std::cout << path << ": mean entropy " << mean_entropy(labels) << " nats\n";
      } catch (const std::exception& e) {
        std::cerr << src.name << " / " << t.name << ": " << e.what() << '\n';
        rc = kPartial;
      }
    }
  }
  return rc;
}

int cmd_distill(const ExperimentConfig& cfg, const std::string& dataset, const std::string& teacher,
                const std::string& student, std::string out) {
  const auto& src = find_dataset(cfg, dataset);
  const auto p = prepare_dataset(src, cfg);
  TeacherSpec t = find_teacher(cfg, teacher);
  if (t.kind == TeacherKind::Cache) t.cache_path = expand_cache_path(t.cache_path, src.name);
  const auto& s = find_student(cfg, student);
  const std::vector<TeacherSpec> one{t};
  const auto labels =
      annotate(collect_oof(p.train, p.plan, one, model_seed(p.seed, "oof/" + t.name)), cfg.annotation, p.train.n_classes);
  const auto name = student_row_name(t.name, s.name);
  const auto m = train_student(s, p.train, labels, cfg.loss, model_seed(p.seed, name));
  if (out.empty()) out = (fs::path(cfg.output_dir) / "models" / (src.name + "." + t.name + "." + s.name + ".model")).string();
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream f(out);
  if (m.kind == StudentKind::Gbdt) save_gbdt(f, m.gbdt);
  else save_mlp(f, m.mlp);
  if (!f) throw Error("cannot write '" + out + "'");
  const Matrix probs = m.predict(p.test.features);
  std::cout << name << " on " << src.name << ": test AUC " << roc_auc(probs, p.test.labels) << ", model " << out << '\n';
  return kOk;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& dataset, const std::string& model_path) {
  const auto& src = find_dataset(cfg, dataset);
  const auto p = prepare_dataset(src, cfg);
  const auto m = load_model(model_path);
  const Matrix probs = m.predict(p.test.features);
  std::cout << "auc " << roc_auc(probs, p.test.labels) << "\nece " << ece(probs, p.test.labels) << "\nlog_loss "
            << log_loss(probs, p.test.labels) << "\naccuracy " << accuracy(probs, p.test.labels) << '\n';
  try {
    const auto t = fit_temperature(probs, p.test.labels, 0.05, p.seed);
    const Matrix scaled = apply_temperature(probs, t.temperature);
    std::cout << "temperature " << t.temperature << "\nvalidation_nll " << t.nll_before << " -> " << t.nll_after
              << "\nece_after_scaling " << ece(scaled, p.test.labels) << '\n';
  } catch (const Error& e) {
    std::cout << "temperature n/a (" << e.what() << ")\n";
  }
  return kOk;
}

int cmd_bench(const ExperimentConfig& cfg, const std::string& dataset, const std::string& model_path) {
  const auto m = load_model(model_path);
  std::vector<std::pair<std::string, Matrix>> sets;
  for (const auto& src : cfg.datasets) {
    if (!dataset.empty() && src.name != dataset) continue;
    sets.emplace_back(src.name, prepare_dataset(src, cfg).test.features);
  }
  const auto rep = measure_latency(model_path, sets, [&m](const Matrix& x) { return m.predict(x); }, cfg.bench);
  for (const auto& s : rep.per_dataset)
    std::cout << s.dataset << ": mean " << s.mean_ms << " ms (min " << s.min_ms << ", max " << s.max_ms
              << ", reps " << s.inner_reps << ")\n";
  std::cout << "macro mean " << rep.macro_mean_ms << " ms per batch of " << rep.batch_size
            << (rep.pinned ? " (pinned)" : " (not pinned)") << '\n';
  return kOk;
}

int cmd_leak_demo(const MixtureSpec& ms, int k, int folds, std::uint64_t seed) {
  const Dataset ds = make_mixture(ms);
  const auto plan = make_folds(ds.labels, folds, seed);
  const std::vector<TeacherSpec> leaky{TeacherSpec::knn(1)};
  const std::vector<TeacherSpec> oof{TeacherSpec::knn(k)};
  std::cout << "dataset: n=" << ms.n << " d=" << ms.d << " C=" << ms.classes << " separation=" << ms.separation << '\n'
            << "leaky (knn k=1, scored in context): mean entropy " << mean_entropy(collect_leaky(ds, leaky, seed))
            << " nats\n"
            << "out-of-fold (knn k=" << k << ", K=" << folds
            << "): mean entropy " << mean_entropy(collect_oof(ds, plan, oof, seed)) << " nats\n"
            << "uniform: " << std::log(static_cast<double>(ms.classes)) << " nats\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-fold knowledge distillation for tabular students"};
  app.require_subcommand(1);
  std::string config_path, dataset, teacher, student, model, out;

  auto add_config = [&](CLI::App* sub) { sub->add_option("-c,--config", config_path, "JSON experiment config")->required(); };
  auto* split = app.add_subcommand("split", "Split datasets and write fold plans and preprocessed matrices");
  add_config(split);
  auto* label = app.add_subcommand("label", "Write out-of-fold prediction caches for built-in teachers");
  add_config(label);
  auto* distill = app.add_subcommand("distill", "Train one student on one teacher's labels and save it");
  add_config(distill);
  distill->add_option("--dataset", dataset);
  distill->add_option("--teacher", teacher);
  distill->add_option("--student", student);
  distill->add_option("-o,--out", out, "Model output path");
  auto* eval = app.add_subcommand("eval", "Score a saved model on a dataset's test split");
  add_config(eval);
  eval->add_option("--dataset", dataset);
  eval->add_option("-m,--model", model)->required();
  auto* bench = app.add_subcommand("bench", "Single-thread prediction latency of a saved model");
  add_config(bench);
  bench->add_option("--dataset", dataset, "Only this dataset (default: all)");
  bench->add_option("-m,--model", model)->required();
  bool pin = false;
  bench->add_flag("--pin", pin, "Pin the measuring thread to one core");
  auto* ablate = app.add_subcommand("ablate", "Run the seven-configuration ablation grid");
  add_config(ablate);
  auto* report = app.add_subcommand("report", "Run the full experiment and write reports");
  add_config(report);
  auto* leak = app.add_subcommand("leak-demo", "Contrast leaky and out-of-fold label entropy");
  MixtureSpec ms;
  ms.separation = 0.5;
  int k = 5, folds = 5;
  std::uint64_t seed = 0;
  leak->add_option("--n", ms.n);
  leak->add_option("--d", ms.d);
  leak->add_option("--classes", ms.classes);
  leak->add_option("--separation", ms.separation);
  leak->add_option("--k", k);
  leak->add_option("--folds", folds);
  leak->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (leak->parsed()) {
      ms.seed = seed;
      return cmd_leak_demo(ms, k, folds, seed);
    }
    ExperimentConfig cfg = load_config(config_path);
    if (split->parsed()) return cmd_split(cfg);
    if (label->parsed()) return cmd_label(cfg);
    if (distill->parsed()) return cmd_distill(cfg, dataset, teacher, student, out);
    if (eval->parsed()) return cmd_eval(cfg, dataset, model);
    if (bench->parsed()) {
      cfg.bench.pin_core = cfg.bench.pin_core || pin;
      return cmd_bench(cfg, dataset, model);
    }
    if (ablate->parsed()) {
      const auto res = run_ablation(cfg);
      for (const auto& f : res.files) std::cout << f << '\n';
      for (const auto& r : res.rows)
        for (const auto& e : r.errors) std::cerr << r.name << ": " << e << '\n';
      return res.partial_failure() ? kPartial : kOk;
    }
    if (report->parsed()) {
      const auto res = run_experiment(cfg);
      for (const auto& f : res.files) std::cout << f << '\n';
      return res.partial_failure() ? kPartial : kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kPartial;
  }
  return kOk;
}
