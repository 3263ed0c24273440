#include "hamobe_cli/cli.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hamobe/checkpoint.hpp"
#include "hamobe/error.hpp"
#include "hamobe/evaluator.hpp"
#include "hamobe/feature_store.hpp"
#include "hamobe/trainer.hpp"

namespace hamobe::cli {

namespace {

const std::set<std::string> kModelKeys = {"d",  "K",      "T",  "n1",   "n2",   "M", "heads", "num_identities",
                                          "alpha", "beta", "margin", "q", "lr", "temporal_aggregation",
                                          "dual_shared_heads"};
const std::set<std::string> kRunKeys = {"seed",  "manifest",         "checkpoint",      "out",
                                        "protocol", "steps",         "batch_identities", "single_per_dual",
                                        "dual_training", "checkpoint_every", "synthetic"};
const std::set<std::string> kSyntheticKeys = {"cue",      "subjects", "tracklets", "frames",      "tokens",
                                              "channels", "noise_sigma", "amplitude", "same_clothes"};

void parse_synthetic(const nlohmann::json& j, SyntheticSpec& s) {
  if (!j.is_object()) fail(ErrorKind::Config, "'synthetic' must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kSyntheticKeys.contains(key)) fail(ErrorKind::Config, "unknown synthetic key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  if (j.contains("cue")) s.cue = parse_cue(j.at("cue").get<std::string>());
  get("subjects", s.num_subjects);
  get("tracklets", s.tracklets_per_subject);
  get("frames", s.frames);
  get("tokens", s.tokens);
  get("channels", s.channels);
  get("noise_sigma", s.noise_sigma);
  get("amplitude", s.amplitude);
  get("same_clothes", s.same_clothes);
}

std::string error_line(std::string_view kind, std::string_view message) {
  return nlohmann::json{{"error", kind}, {"message", message}}.dump();
}

struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> manifest;
  std::optional<std::string> checkpoint;
  std::optional<std::string> protocol;
  std::optional<double> dual_band_q;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_identities;
  std::optional<std::size_t> mode_ratio;
  std::optional<std::size_t> checkpoint_every;
  std::optional<double> lr;
  std::optional<double> alpha;
  std::optional<double> beta;
  bool single_only = false;
  std::optional<std::string> resume;
  // gen-synthetic
  std::optional<std::string> cue;
  std::optional<int> subjects;
  std::optional<int> tracklets;
  std::optional<std::size_t> frames;
  std::optional<std::size_t> tokens;
  std::optional<std::size_t> channels;
  std::optional<double> noise;
  std::optional<double> amplitude;
  bool same_clothes = false;
  // gradcheck
  double eps = 1e-6;
  double tol = 1e-4;
  // export-heatmap
  std::optional<std::string> volume;
  std::size_t expert = 0;
  std::size_t target = 0;
  std::string name = "heatmap";
  // inspect
  std::string path;
};

RunConfig resolve(const Flags& f) {
  RunConfig rc = f.config ? load_run_config(*f.config) : RunConfig{};
  if (f.seed) {
    rc.model.seed = *f.seed;
    rc.synthetic.seed = *f.seed;
  }
  if (f.out) rc.out = *f.out;
  if (f.manifest) rc.manifest = *f.manifest;
  if (f.checkpoint) rc.checkpoint = *f.checkpoint;
  if (f.protocol) rc.protocol = parse_protocol(*f.protocol);
  if (f.dual_band_q) rc.model.band_q = *f.dual_band_q;
  if (f.steps) rc.steps = *f.steps;
  if (f.batch_identities) rc.batch_identities = *f.batch_identities;
  if (f.mode_ratio) rc.single_per_dual = *f.mode_ratio;
  if (f.checkpoint_every) rc.checkpoint_every = *f.checkpoint_every;
  if (f.lr) rc.model.lr = *f.lr;
  if (f.alpha) rc.model.alpha = *f.alpha;
  if (f.beta) rc.model.beta = *f.beta;
  if (f.single_only) rc.dual_training = false;
  if (f.cue) rc.synthetic.cue = parse_cue(*f.cue);
  if (f.subjects) rc.synthetic.num_subjects = *f.subjects;
  if (f.tracklets) rc.synthetic.tracklets_per_subject = *f.tracklets;
  if (f.frames) rc.synthetic.frames = *f.frames;
  if (f.tokens) rc.synthetic.tokens = *f.tokens;
  if (f.channels) rc.synthetic.channels = *f.channels;
  if (f.noise) rc.synthetic.noise_sigma = *f.noise;
  if (f.amplitude) rc.synthetic.amplitude = *f.amplitude;
  if (f.same_clothes) rc.synthetic.same_clothes = true;
  return rc;
}

std::filesystem::path require(const std::optional<std::filesystem::path>& p, const char* what) {
  if (!p) fail(ErrorKind::Config, std::string("missing ") + what);
  return *p;
}

int cmd_gen_synthetic(const RunConfig& rc, std::ostream& out) {
  const Dataset ds = gen_synthetic(rc.synthetic);
  std::filesystem::create_directories(rc.out);
  save_dataset(ds, rc.out);
  out << nlohmann::json{{"manifest", (rc.out / "manifest.jsonl").string()},
                        {"records", ds.manifest.records.size()},
                        {"cue", to_string(rc.synthetic.cue)}}
             .dump()
      << '\n';
  return kExitOk;
}

void check_explicit_dims(const RunConfig& rc, const ModelConfig& actual) {
  auto check = [&](const char* key, std::size_t requested, std::size_t found) {
    if (std::find(rc.explicit_model_keys.begin(), rc.explicit_model_keys.end(), key) == rc.explicit_model_keys.end()) {
      return;
    }
    if (requested != found) {
      fail(ErrorKind::Config, std::string("config sets ") + key + "=" + std::to_string(requested) +
                                  " but the data has " + std::to_string(found));
    }
  };
  check("d", rc.model.d, actual.d);
  check("K", rc.model.tokens, actual.tokens);
  check("T", rc.model.frames, actual.frames);
}

int cmd_train(const RunConfig& rc, const std::optional<std::string>& resume, std::ostream& out) {
  const Dataset ds = load_dataset(require(rc.manifest, "--manifest"));
  TrainState state = resume ? from_checkpoint(load_checkpoint(*resume)) : init_train_state(rc.model, ds);
  if (!resume) check_explicit_dims(rc, state.model.config);
  TrainOptions opts;
  opts.steps = rc.steps;
  opts.batch_identities = rc.batch_identities;
  opts.dual_training = rc.dual_training;
  opts.single_per_dual = rc.single_per_dual;
  opts.checkpoint_every = rc.checkpoint_every;
  opts.out_dir = rc.out;
  fit(state, ds, opts);
  nlohmann::json summary{{"steps", state.step},
                         {"checkpoint", (rc.out / "ckpt.hpk1").string()},
                         {"train_log", (rc.out / "train_log.csv").string()},
                         {"train_top1", classification_accuracy(state.model, ds, state.identities, Split::Train)}};
  if (!state.history.empty()) summary["final_loss"] = state.history.back().loss;
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& rc, std::ostream& out) {
  const Dataset ds = load_dataset(require(rc.manifest, "--manifest"));
  const Model model = load_checkpoint(require(rc.checkpoint, "--checkpoint")).model;
  const EvalReport report = evaluate(model, ds, EvalOptions{rc.protocol, rc.model.band_q});
  std::filesystem::create_directories(rc.out);
  const auto path = rc.out / "report.json";
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write " + path.string());
  f << nlohmann::json(report).dump(2) << '\n';
  if (!f) fail(ErrorKind::Io, "short write to " + path.string());
  out << nlohmann::json{{"report", path.string()},
                        {"mAP", report.metrics.mAP},
                        {"top1", report.metrics.top1()},
                        {"single_input_top1", report.single_input.top1()},
                        {"band_size", report.band_size},
                        {"w2_mean", report.w2_mean}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, double eps, double tol, std::ostream& out) {
  ModelConfig cfg = tiny_config();
  cfg.seed = rc.model.seed;
  SyntheticSpec spec;
  spec.num_subjects = 2;
  spec.tracklets_per_subject = 2;
  spec.frames = cfg.frames;
  spec.tokens = cfg.tokens;
  spec.channels = cfg.channels();
  spec.seed = rc.model.seed;
  const Dataset ds = gen_synthetic(spec);
  TrainState state = init_train_state(cfg, ds);
  const Batch batch = sample_batch(TrainIndex::build(ds), 2, state.rng);
  double worst = 0.0;
  bool passed = true;
  for (Mode mode : {Mode::Single, Mode::Dual}) {
    const auto report = check_objective_gradient(state.model, ds, batch, mode, eps, tol);
    out << nlohmann::json{{"mode", to_string(mode)},
                          {"max_rel_error", report.max_rel_error},
                          {"coords", report.coords_checked}}
               .dump()
        << '\n';
    worst = std::max(worst, report.max_rel_error);
    passed = passed && report.passed;
  }
  out << "max_rel_error " << worst << (passed ? " PASS" : " FAIL") << '\n';
  return passed ? kExitOk : kExitFailure;
}

int cmd_export_heatmap(const RunConfig& rc, const Flags& f, std::ostream& out) {
  if (!f.volume) fail(ErrorKind::Config, "missing --volume");
  const Model model = load_checkpoint(require(rc.checkpoint, "--checkpoint")).model;
  const Tensor volume = read_volume(*f.volume);
  std::filesystem::create_directories(rc.out);
  const auto grid = export_heatmap(model, volume, f.expert, f.target, rc.out / f.name);
  out << nlohmann::json{{"csv", (rc.out / (f.name + ".csv")).string()},
                        {"pgm", (rc.out / (f.name + ".pgm")).string()},
                        {"side", grid.side}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  const std::string m(magic, static_cast<std::size_t>(in.gcount()));
  nlohmann::json j;
  if (m == "HFV1") {
    const Tensor t = read_volume(path);
    j = {{"kind", "hfv1"}, {"T", t.dim(0)}, {"K", t.dim(1)}, {"C", t.dim(2)}, {"d", t.dim(2) / 4}};
  } else if (m == "HPK1") {
    const Checkpoint ck = load_checkpoint(path);
    j = {{"kind", "hpk1"},
         {"config", ck.model.config},
         {"parameters", ck.model.params.total_size()},
         {"step", ck.meta.value("step", std::size_t{0})}};
  } else {
    const Manifest man = read_manifest(path);
    validate_manifest(man);
    std::map<std::string, std::size_t> per_split;
    std::set<int> subjects;
    for (const auto& r : man.records) {
      ++per_split[std::string(to_string(r.split))];
      subjects.insert(r.subject_id);
    }
    j = {{"kind", "manifest"}, {"records", man.records.size()}, {"subjects", subjects.size()}, {"splits", per_split}};
  }
  out << j.dump() << '\n';
  return kExitOk;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run config");
  sub->add_option("--seed", f.seed, "Root seed for all randomness");
  sub->add_option("--out", f.out, "Output directory");
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::Config, "run config must be a JSON object");
  RunConfig rc;
  nlohmann::json model = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (kModelKeys.contains(key)) {
      model[key] = value;
      rc.explicit_model_keys.push_back(key);
    } else if (!kRunKeys.contains(key)) {
      fail(ErrorKind::Config, "unknown config key '" + key + "'");
    }
  }
  try {
    model.get_to(rc.model);
    if (j.contains("seed")) {
      rc.model.seed = j.at("seed").get<std::uint64_t>();
      rc.synthetic.seed = rc.model.seed;
    }
    if (j.contains("manifest")) rc.manifest = j.at("manifest").get<std::string>();
    if (j.contains("checkpoint")) rc.checkpoint = j.at("checkpoint").get<std::string>();
    if (j.contains("out")) rc.out = j.at("out").get<std::string>();
    if (j.contains("protocol")) rc.protocol = parse_protocol(j.at("protocol").get<std::string>());
    if (j.contains("steps")) j.at("steps").get_to(rc.steps);
    if (j.contains("batch_identities")) j.at("batch_identities").get_to(rc.batch_identities);
    if (j.contains("single_per_dual")) j.at("single_per_dual").get_to(rc.single_per_dual);
    if (j.contains("dual_training")) j.at("dual_training").get_to(rc.dual_training);
    if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(rc.checkpoint_every);
    if (j.contains("synthetic")) parse_synthetic(j.at("synthetic"), rc.synthetic);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("run config: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::Config, e.what());
  }
  rc.model.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot read config " + path.string());
  try {
    return parse_run_config(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
}

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical mixture of biometric experts for video person re-identification"};
  app.name(argv.empty() ? "hamobe" : argv.front());
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-synthetic", "Write a planted-cue synthetic dataset");
  add_common(gen, f);
  gen->add_option("--cue", f.cue, "long_term | short_term | temporal | mixed");
  gen->add_option("--subjects", f.subjects);
  gen->add_option("--tracklets", f.tracklets, "Tracklets per subject");
  gen->add_option("--frames", f.frames);
  gen->add_option("--tokens", f.tokens);
  gen->add_option("--channels", f.channels);
  gen->add_option("--noise", f.noise, "Noise standard deviation");
  gen->add_option("--amplitude", f.amplitude);
  gen->add_flag("--same-clothes", f.same_clothes, "Gallery reuses the query outfit");

  auto* train = app.add_subcommand("train", "Train on a manifest");
  add_common(train, f);
  train->add_option("--manifest", f.manifest);
  train->add_option("--steps", f.steps);
  train->add_option("--batch-identities", f.batch_identities, "Identities per batch (0: all)");
  train->add_option("--mode-ratio", f.mode_ratio, "Single-input steps per dual-input step");
  train->add_flag("--single-only", f.single_only, "Never train in dual-input mode");
  train->add_option("--checkpoint-every", f.checkpoint_every);
  train->add_option("--resume", f.resume, "Continue from a checkpoint");
  train->add_option("--lr", f.lr);
  train->add_option("--alpha", f.alpha);
  train->add_option("--beta", f.beta);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on query/gallery splits");
  add_common(eval, f);
  eval->add_option("--manifest", f.manifest);
  eval->add_option("--checkpoint", f.checkpoint);
  eval->add_option("--protocol", f.protocol, "general | sc | dc");
  eval->add_option("--dual-band-q", f.dual_band_q, "Central band width in percent");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
  add_common(grad, f);
  grad->add_option("--eps", f.eps);
  grad->add_option("--tol", f.tol);

  auto* heat = app.add_subcommand("export-heatmap", "Write first-layer gate weights as CSV and PGM");
  add_common(heat, f);
  heat->add_option("--checkpoint", f.checkpoint);
  heat->add_option("--volume", f.volume, "HFV1 file");
  heat->add_option("--expert", f.expert, "First-layer expert i");
  heat->add_option("--target", f.target, "Second-layer target j");
  heat->add_option("--name", f.name, "Output file stem");

  auto* insp = app.add_subcommand("inspect", "Describe an HFV1, HPK1 or manifest file");
  insp->add_option("path", f.path)->required();

  std::vector<char*> cargv;
  std::vector<std::string> copy = argv.empty() ? std::vector<std::string>{"hamobe"} : argv;
  for (auto& s : copy) cargv.push_back(s.data());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what()) << '\n' << app.help();
    return kExitUsage;
  }

  try {
    if (insp->parsed()) return cmd_inspect(f.path, out);
    const RunConfig rc = resolve(f);
    if (gen->parsed()) return cmd_gen_synthetic(rc, out);
    if (train->parsed()) return cmd_train(rc, f.resume, out);
    if (eval->parsed()) return cmd_eval(rc, out);
    if (grad->parsed()) return cmd_gradcheck(rc, f.eps, f.tol, out);
    if (heat->parsed()) return cmd_export_heatmap(rc, f, out);
  } catch (const Error& e) {
    err << error_line(to_string(e.kind()), e.what()) << '\n';
    return e.kind() == ErrorKind::Config ? kExitConfig : kExitFailure;
  } catch (const std::exception& e) {
    err << error_line("internal", e.what()) << '\n';
    return kExitFailure;
  }
  err << error_line("usage", "no subcommand") << '\n' << app.help();
  return kExitUsage;
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace hamobe::cli
