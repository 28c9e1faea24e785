// dpffn: dataset generation, training, evaluation and experiment sweeps.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpffn/dpffn.hpp"

namespace fs = std::filesystem;
using namespace dpffn;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::string hex(const unsigned char* p, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(p[i]);
  return os.str();
}

// Content hash in git's blob form: sha1("blob <size>\0" + bytes).
std::string git_blob_sha1(const fs::path& path) {
  const auto bytes = io::read_file(path);
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  return hex(md, len);
}

template <typename T>
T load_json_file(const std::string& path, const char* what) {
  Json j;
  try {
    j = Json::parse(io::read_text(path));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(what) + " '" + path + "': " + e.what());
  }
  return j.get<T>();
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--grid: cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--grid: empty grid");
  return out;
}

struct Common {
  std::string model_config, train_config, data, out, checkpoint;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::vector<std::string> argv;
};

DpffnConfig model_config(const Common& c, const Dataset* ds) {
  DpffnConfig m;
  if (!c.model_config.empty()) {
    m = load_json_file<DpffnConfig>(c.model_config, "model config");
  } else if (ds) {
    // Desk-scale defaults sized to the dataset.
    m.d_model = 64;
    m.num_heads = 4;
    m.global_depth = 2;
    m.local_depth = 2;
    m.num_classes = ds->spec.num_classes;
    m.input_bins = ds->spec.radar.range_bins;
  }
  return m;
}

TrainConfig train_config(const Common& c) {
  TrainConfig t;
  if (!c.train_config.empty()) t = load_json_file<TrainConfig>(c.train_config, "train config");
  if (c.seed) t.seed = *c.seed;
  return t;
}

void write_run_manifest(const fs::path& where, const Common& c, const Json& extra) {
  Json j{{"argv", c.argv}, {"threads", kernel::threads()}};
  if (!c.data.empty()) j["dataset"] = {{"path", c.data}, {"git_sha1", git_blob_sha1(c.data)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  io::write_atomic(where, j.dump(2) + "\n");
}

void emit(const std::string& out, const Json& j) {
  if (out.empty())
    std::cout << j.dump(2) << "\n";
  else
    io::write_atomic(out, j.dump(2) + "\n");
}

fs::path sidecar(const std::string& out, const char* suffix) { return fs::path(out + suffix); }

int run_gen(const std::string& spec_path, bool paper_scale, const std::string& out, std::optional<std::uint64_t> seed) {
  DatasetSpec spec = paper_scale ? DatasetSpec::paper_scale() : DatasetSpec::desk_default();
  if (!spec_path.empty()) spec = load_json_file<DatasetSpec>(spec_path, "dataset spec");
  if (seed) spec.rng_seed = *seed;
  spec.validate();
  const auto ds = synth_dataset(spec);
  write_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out << " (T=" << spec.hrrps_per_sequence
            << ", L=" << spec.radar.range_bins << ", classes=" << spec.num_classes << ")\n";
  return kOk;
}

int run_train(const Common& c, const std::string& resume, std::optional<int> epochs) {
  const auto ds = read_dataset(c.data);
  const auto m = model_config(c, &ds);
  auto t = train_config(c);
  if (epochs) t.max_epochs = *epochs;
  check_compatible(m, ds);
  fs::create_directories(c.out);
  write_run_manifest(fs::path(c.out) / "run.json", c, {{"command", "train"}, {"model", m}, {"train", t}});
  TrainOptions opts;
  opts.out_dir = c.out;
  opts.resume_from = resume;
  opts.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss.total << " (ce "
              << r.train_loss.cross << ", fusion " << r.train_loss.fusion << ") train_acc " << r.train_accuracy;
    if (r.val_accuracy) std::cout << " val_acc " << *r.val_accuracy;
    std::cout << "\n";
  };
  const auto res = train<TrainScalar>(m, t, ds, opts);
  std::cout << "best val_acc " << res.best_val_accuracy << " at epoch " << res.best_epoch << "\n";
  return kOk;
}

int run_eval(const Common& c, std::optional<double> snr, std::optional<double> missing) {
  if (missing && !(*missing >= 0.0 && *missing < 1.0)) throw ConfigError("--missing-rate: must be in [0, 1)");
  const auto ck = load_checkpoint(c.checkpoint);
  const auto model = model_from_checkpoint<TrainScalar>(ck);
  const auto ds = read_dataset(c.data);
  check_compatible(model.config(), ds);
  const auto report = evaluate(model, evaluation_set(ds), Corruption{snr, missing, c.seed.value_or(0)});
  Json j = report;
  j["model"] = model.config();
  emit(c.out, j);
  if (!c.out.empty())
    write_run_manifest(sidecar(c.out, ".run.json"), c, {{"command", "eval"}, {"checkpoint", c.checkpoint}, {"model", model.config()}});
  return kOk;
}

int run_sweep(const Common& c, bool snr, const std::string& grid_text) {
  const auto grid = grid_text.empty() ? (snr ? default_snr_grid() : default_missing_grid()) : parse_grid(grid_text);
  if (!snr)
    for (double r : grid)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("--grid: missing rates must be in [0, 1)");
  const auto model = model_from_checkpoint<TrainScalar>(load_checkpoint(c.checkpoint));
  const auto ds = read_dataset(c.data);
  check_compatible(model.config(), ds);
  const auto seed = c.seed.value_or(0);
  const auto reports = snr ? sweep_snr(model, ds, grid, seed, c.jobs) : sweep_missing(model, ds, grid, seed, c.jobs);
  emit(c.out, Json(reports));
  if (!c.out.empty())
    write_run_manifest(sidecar(c.out, ".run.json"), c,
                       {{"command", snr ? "sweep-snr" : "sweep-missing"}, {"grid", grid}, {"model", model.config()}});
  return kOk;
}

int run_ablate(const Common& c) {
  const auto ds = read_dataset(c.data);
  const auto m = model_config(c, &ds);
  const auto t = train_config(c);
  check_compatible(m, ds);
  fs::create_directories(c.out);
  write_run_manifest(fs::path(c.out) / "run.json", c, {{"command", "ablate"}, {"model", m}, {"train", t}});
  const auto rows = run_ablation(ds, m, t, c.out, c.jobs);
  for (const auto& r : rows) std::cout << std::left << std::setw(20) << r.name << " acc " << r.report.accuracy << "\n";
  std::cout << "table: " << (fs::path(c.out) / "ablation.json").string() << "\n";
  return kOk;
}

int run_hyperparam(const Common& c, const std::string& param, const std::string& grid_text) {
  const auto h = hyperparam_from_string(param);
  std::vector<int> grid;
  if (grid_text.empty()) {
    grid = default_hyperparam_grid();
  } else {
    for (double v : parse_grid(grid_text)) {
      if (v != std::floor(v)) throw ConfigError("--grid: hyperparameter values must be integers");
      grid.push_back(static_cast<int>(v));
    }
  }
  const auto ds = read_dataset(c.data);
  const auto m = model_config(c, &ds);
  const auto t = train_config(c);
  check_compatible(m, ds);
  for (int v : grid) with_hyperparam(m, h, v);
  fs::create_directories(c.out);
  write_run_manifest(fs::path(c.out) / "run.json", c,
                     {{"command", "hyperparam"}, {"param", to_string(h)}, {"grid", grid}, {"model", m}, {"train", t}});
  const auto points = sweep_hyperparam(ds, h, grid, m, t, c.out, c.jobs);
  for (const auto& p : points)
    std::cout << p.name << " params " << p.param_count << " acc " << p.report.accuracy << "\n";
  return kOk;
}

int run_gradcheck(const std::string& size) {
  if (size != "tiny") throw ConfigError("--size: only 'tiny' is supported");
  const auto reports = run_gradient_suite();
  const GradCaseReport* worst = nullptr;
  double worst_ratio = -1.0;
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(26) << r.name << " max_rel_err "
              << std::scientific << std::setprecision(3) << r.result.max_rel_error << " (tol " << r.tolerance << ")"
              << std::defaultfloat << "\n";
    ok = ok && r.passed();
    const double ratio = r.result.max_rel_error / r.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst = &r;
    }
  }
  if (worst)
    std::cout << "worst: " << worst->name << " input " << worst->result.worst_input << " coordinate "
              << worst->result.worst_index << " analytic " << worst->result.worst_analytic << " numeric "
              << worst->result.worst_numeric << "\n";
  std::cout << reports.size() << " checks, " << (ok ? "all passed" : "FAILED") << "\n";
  return ok ? kOk : kNumeric;
}

int run_export(const Common& c) {
  const auto model = model_from_checkpoint<TrainScalar>(load_checkpoint(c.checkpoint));
  const auto ds = read_dataset(c.data);
  check_compatible(model.config(), ds);
  const auto csv = export_features(model, ds);
  if (c.out.empty())
    std::cout << csv;
  else
    io::write_atomic(c.out, csv);
  return kOk;
}

int run_inspect(const std::string& data, const std::string& checkpoint) {
  if (data.empty() == checkpoint.empty()) throw ConfigError("inspect: pass exactly one of --data or --checkpoint");
  if (!data.empty()) {
    PhrpHeader h;
    const auto samples = decode_phrp(io::read_file(data), data, &h);
    std::cout << "PHRP dataset " << data << "\n"
              << "  samples      " << h.sample_count << "\n"
              << "  T (max)      " << h.max_steps << "\n"
              << "  L            " << h.bins << "\n"
              << "  classes      " << h.num_classes << "\n"
              << "  class histogram:\n";
    std::vector<std::size_t> hist(h.num_classes, 0);
    for (const auto& s : samples) ++hist[static_cast<std::size_t>(s.label)];
    for (std::size_t c = 0; c < hist.size(); ++c) std::cout << "    " << c << ": " << hist[c] << "\n";
    if (fs::exists(manifest_path(data))) std::cout << "  manifest     " << manifest_path(data).string() << "\n";
    return kOk;
  }
  const auto ck = load_checkpoint(checkpoint);
  std::size_t params = 0, state = 0;
  for (const auto& t : ck.tensors) {
    const bool opt = t.name.rfind("adam.", 0) == 0 || t.name.rfind("sgd.", 0) == 0;
    (opt ? state : params) += t.values.size();
  }
  const auto analytic = param_count(ck.model);
  std::cout << "checkpoint " << checkpoint << "\n"
            << "  epoch            " << ck.epoch << "\n"
            << "  best val acc     " << ck.best_val_accuracy << "\n"
            << "  tensors          " << ck.tensors.size() << "\n"
            << "  param_count      " << params << "\n"
            << "  analytic count   " << analytic << (analytic == params ? " (match)" : " (MISMATCH)") << "\n"
            << "  optimizer values " << state << " after " << ck.optimizer_steps << " steps\n"
            << "  model            " << Json(ck.model).dump() << "\n";
  return analytic == params ? kOk : kData;
}

}  // namespace

int main(int argc, char** argv) {
  kernel::set_threads(kernel::threads_from_env());
  CLI::App app{"Dual-polarization HRRP simulation and DPFFN training"};
  app.require_subcommand(1);

  Common c;
  c.argv.assign(argv, argv + argc);
  std::uint64_t seed_value = 0;
  auto add_seed = [&](CLI::App* sub) { return sub->add_option("--seed", seed_value, "random seed"); };

  auto* gen = app.add_subcommand("gen", "synthesize a PHRP dataset and its manifest");
  std::string spec_path, gen_out;
  bool paper_scale = false;
  gen->add_option("--spec", spec_path, "dataset spec JSON (desk default when omitted)")->check(CLI::ExistingFile);
  gen->add_flag("--paper-scale", paper_scale, "10 classes x 10 postures x 25 sequences, T=512");
  gen->add_option("--out", gen_out, "output dataset file")->required();
  auto* gen_seed = add_seed(gen);

  auto* tr = app.add_subcommand("train", "train a model");
  std::string resume;
  std::optional<int> epochs;
  tr->add_option("--model-config", c.model_config)->check(CLI::ExistingFile);
  tr->add_option("--train-config", c.train_config)->check(CLI::ExistingFile);
  tr->add_option("--data", c.data)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", c.out, "output directory")->required();
  tr->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  tr->add_option("--epochs", epochs, "override max_epochs");
  auto* tr_seed = add_seed(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out postures");
  std::optional<double> snr, missing;
  ev->add_option("--checkpoint", c.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", c.data)->required()->check(CLI::ExistingFile);
  ev->add_option("--snr", snr, "SNR in dB");
  ev->add_option("--missing-rate", missing, "fraction of time steps removed");
  ev->add_option("--out", c.out, "report JSON (stdout when omitted)");
  auto* ev_seed = add_seed(ev);

  std::string grid;
  std::vector<std::pair<CLI::App*, CLI::Option*>> sweeps;
  for (const char* name : {"sweep-snr", "sweep-missing"}) {
    auto* s = app.add_subcommand(name, std::string(name) == "sweep-snr" ? "accuracy versus SNR" : "accuracy versus missing rate");
    s->add_option("--checkpoint", c.checkpoint)->required()->check(CLI::ExistingFile);
    s->add_option("--data", c.data)->required()->check(CLI::ExistingFile);
    s->add_option("--grid", grid, "comma-separated grid");
    s->add_option("--out", c.out, "table JSON (stdout when omitted)");
    s->add_option("--jobs", c.jobs, "parallel grid points")->check(CLI::PositiveNumber);
    sweeps.emplace_back(s, add_seed(s));
  }

  auto* ab = app.add_subcommand("ablate", "five-row ablation ladder");
  auto* hp = app.add_subcommand("hyperparam", "train one model per hyperparameter value");
  std::string param = "heads";
  std::vector<std::pair<CLI::App*, CLI::Option*>> trainers;
  for (auto* s : {ab, hp}) {
    s->add_option("--model-config", c.model_config)->check(CLI::ExistingFile);
    s->add_option("--train-config", c.train_config)->check(CLI::ExistingFile);
    s->add_option("--data", c.data)->required()->check(CLI::ExistingFile);
    s->add_option("--out", c.out, "output directory")->required();
    s->add_option("--jobs", c.jobs, "parallel runs")->check(CLI::PositiveNumber);
    trainers.emplace_back(s, add_seed(s));
  }
  hp->add_option("--param", param, "heads, M or N")->check(CLI::IsMember({"heads", "M", "N"}));
  hp->add_option("--grid", grid, "comma-separated values (default 4,6,8,10,12)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::string size = "tiny";
  gc->add_option("--size", size)->check(CLI::IsMember({"tiny"}));

  auto* ex = app.add_subcommand("export-features", "CSV of pooled fused features");
  ex->add_option("--checkpoint", c.checkpoint)->required()->check(CLI::ExistingFile);
  ex->add_option("--data", c.data)->required()->check(CLI::ExistingFile);
  ex->add_option("--out", c.out, "CSV file (stdout when omitted)");

  auto* in = app.add_subcommand("inspect", "summarize a dataset or checkpoint");
  std::string in_data, in_ckpt;
  in->add_option("--data", in_data)->check(CLI::ExistingFile);
  in->add_option("--checkpoint", in_ckpt)->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const auto seeded = [&](CLI::Option* o) -> std::optional<std::uint64_t> {
    if (o->count() > 0) return seed_value;
    return std::nullopt;
  };

  try {
    if (*gen) return run_gen(spec_path, paper_scale, gen_out, seeded(gen_seed));
    if (*tr) {
      c.seed = seeded(tr_seed);
      return run_train(c, resume, epochs);
    }
    if (*ev) {
      c.seed = seeded(ev_seed);
      return run_eval(c, snr, missing);
    }
    for (auto [s, opt] : sweeps)
      if (*s) {
        c.seed = seeded(opt);
        return run_sweep(c, s->get_name() == "sweep-snr", grid);
      }
    for (auto [s, opt] : trainers)
      if (*s) {
        c.seed = seeded(opt);
        return s == ab ? run_ablate(c) : run_hyperparam(c, param, grid);
      }
    if (*gc) return run_gradcheck(size);
    if (*ex) return run_export(c);
    if (*in) return run_inspect(in_data, in_ckpt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const GraphError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
