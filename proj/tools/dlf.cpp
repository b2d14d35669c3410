// dlf: synthesize phantoms, fuse labels, train/infer DLF and the baseline
// U-Net, evaluate, ablate and compare methods.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <Eigen/Core>
#include <boost/version.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlf/classicfusion.hpp"
#include "dlf/deepfusion.hpp"
#include "dlf/evalkit.hpp"
#include "dlf/gridnet/checkpoint.hpp"
#include "dlf/parallel.hpp"
#include "dlf/runconfig.hpp"
#include "dlf/synthlab.hpp"
#include "dlf/trainer.hpp"

namespace fs = std::filesystem;
using namespace dlf;

namespace {

constexpr const char* kVersion = "1.0.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string manifest;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--workers", c.workers, "worker threads (default: DLF_WORKERS, else 1)")->check(CLI::PositiveNumber);
  cmd->add_option("--manifest", c.manifest, "run manifest path (default: next to the output)");
}

runconfig::RunConfig load_config(const Common& c) {
  auto cfg = c.config.empty() ? runconfig::RunConfig() : runconfig::RunConfig::load(c.config);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  return cfg;
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct Run {
  std::string command;
  std::string argv;
  fs::path manifest;
  std::vector<std::string> sections;

  void write() const {
    if (!manifest.parent_path().empty()) fs::create_directories(manifest.parent_path());
    std::ofstream out(manifest, std::ios::trunc);
    out << "program=dlf " << kVersion << "\n"
        << "command=" << command << "\n"
        << "argv=" << argv << "\n"
        << "compiler=" << __VERSION__ << "\n"
        << "eigen=" << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION << "\n"
        << "boost=" << BOOST_VERSION / 100000 << '.' << BOOST_VERSION / 100 % 1000 << '.' << BOOST_VERSION % 100 << "\n";
    for (const auto& s : sections) out << s;
    if (!out) throw std::runtime_error("cannot write manifest " + manifest.string());
  }
};

fs::path manifest_for(const Common& c, const fs::path& out, bool is_dir) {
  if (!c.manifest.empty()) return c.manifest;
  if (is_dir) return out / "run_manifest.txt";
  return fs::path(out.string() + ".run.txt");
}

struct Dataset {
  fs::path dir;
  std::vector<std::string> ids;
  int num_labels = 2;

  synthlab::Subject subject(const std::string& id) const {
    if (std::find(ids.begin(), ids.end(), id) == ids.end())
      throw UsageError("subject '" + id + "' is not in " + (dir / "manifest.txt").string());
    auto s = synthlab::read_subject(dir, id);
    return s;
  }
};

Dataset open_dataset(const fs::path& dir) {
  Dataset d{dir, synthlab::read_manifest(dir), 2};
  if (d.ids.empty()) throw std::runtime_error(dir.string() + ": empty manifest");
  for (const auto& id : d.ids) {
    const auto lm = synthlab::read_subject(dir, id).labels;
    d.num_labels = std::max(d.num_labels, lm.num_labels());
  }
  return d;
}

// Atlas ids default to every subject except the target.
std::vector<std::string> atlas_ids(const Dataset& d, const std::string& target, const std::string& list) {
  if (!list.empty()) return split_ids(list);
  std::vector<std::string> out;
  for (const auto& id : d.ids)
    if (id != target) out.push_back(id);
  if (out.empty()) throw UsageError("no atlases available");
  return out;
}

std::vector<volcore::AtlasBundle> load_atlases(const Dataset& d, const std::vector<std::string>& ids, int L) {
  std::vector<volcore::AtlasBundle> out;
  for (const auto& id : ids) {
    auto s = d.subject(id);
    out.push_back({synthlab::stack_modalities(s), volcore::LabelMap(s.labels.dims(), L, std::move(s.labels).labels(),
                                                                   s.labels.spacing())});
  }
  return out;
}

std::vector<synthlab::Subject> load_subjects(const Dataset& d, const std::vector<std::string>& ids) {
  std::vector<synthlab::Subject> out;
  for (const auto& id : ids) out.push_back(d.subject(id));
  return out;
}

volcore::LabelMap with_labels(volcore::LabelMap lm, int L) {
  return volcore::LabelMap(lm.dims(), std::max(L, lm.num_labels()), std::move(lm).labels(), lm.spacing());
}

std::vector<double> read_numbers(const std::string& arg) {
  std::string text = arg;
  if (fs::is_regular_file(arg)) {
    std::ifstream in(arg);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  std::replace(text.begin(), text.end(), ',', ' ');
  std::istringstream in(text);
  std::vector<double> out;
  for (std::string tok; in >> tok;) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw UsageError("not a number: '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

deepfusion::DlfModel<float> train_dlf_model(const Dataset& d, const std::vector<std::string>& subjects,
                                            const runconfig::RunConfig& cfg, deepfusion::DlfConfig model_cfg,
                                            int workers, Run& run, std::vector<double>* trace) {
  auto tc = cfg.train("dlf");
  tc.workers = workers;
  run.sections.push_back(runconfig::describe(tc));
  const auto subs = load_subjects(d, subjects);
  const auto data = trainer::build_training_set(subs, tc);
  auto r = trainer::train_dlf(data, tc, model_cfg);
  if (trace) *trace = r.epoch_loss;
  return std::move(r.model);
}

std::string loss_lines(const std::vector<double>& trace) {
  std::ostringstream out;
  out.precision(10);
  for (std::size_t e = 0; e < trace.size(); ++e) out << "loss.epoch" << e + 1 << '=' << trace[e] << '\n';
  return out.str();
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-atlas segmentation with deep label fusion and classical baselines"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("dlf ") + kVersion);

  std::string joined;
  for (int i = 0; i < argc; ++i) joined += (i ? " " : "") + std::string(argv[i]);

  // synth
  Common synth_c;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a phantom dataset");
  add_common(synth, synth_c);
  synth->add_option("--out", synth_out, "dataset directory")->required();

  // fuse
  Common fuse_c;
  std::string fuse_method, fuse_data, fuse_target, fuse_atlases, fuse_out;
  auto* fuse = app.add_subcommand("fuse", "classical label fusion");
  add_common(fuse, fuse_c);
  fuse->add_option("--method", fuse_method)->required()->check(CLI::IsMember({"mv", "svwv", "jlf"}));
  fuse->add_option("--data", fuse_data, "dataset directory")->required();
  fuse->add_option("--target", fuse_target, "target subject id")->required();
  fuse->add_option("--atlases", fuse_atlases, "comma-separated atlas ids (default: all others)");
  fuse->add_option("--out", fuse_out, "output label volume")->required();

  // train
  Common train_c;
  std::string train_model, train_data, train_subjects, train_out;
  auto* train = app.add_subcommand("train", "train DLF or the baseline U-Net");
  add_common(train, train_c);
  train->add_option("--model", train_model)->required()->check(CLI::IsMember({"dlf", "unet"}));
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--subjects", train_subjects, "comma-separated training subjects (default: all)");
  train->add_option("--out", train_out, "checkpoint directory")->required();

  // infer
  Common infer_c;
  std::string infer_model, infer_data, infer_target, infer_atlases, infer_out, infer_logits;
  bool infer_lcc = false;
  auto* infer = app.add_subcommand("infer", "dense-grid inference with a checkpoint");
  add_common(infer, infer_c);
  infer->add_option("--model", infer_model, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--data", infer_data, "dataset directory")->required();
  infer->add_option("--target", infer_target, "target subject id")->required();
  infer->add_option("--atlases", infer_atlases, "comma-separated atlas ids for DLF (default: all others)");
  infer->add_option("--out", infer_out, "output label volume")->required();
  infer->add_option("--logits", infer_logits, "also write the stitched logits");
  infer->add_flag("--lcc", infer_lcc, "keep only the largest connected foreground component");

  // eval
  Common eval_c;
  std::string eval_pred, eval_ref, eval_labels, eval_errormap, eval_out;
  auto* eval = app.add_subcommand("eval", "overlap metrics between two label volumes");
  add_common(eval, eval_c);
  eval->add_option("--pred", eval_pred)->required()->check(CLI::ExistingFile);
  eval->add_option("--ref", eval_ref)->required()->check(CLI::ExistingFile);
  eval->add_option("--labels", eval_labels, "comma-separated labels pooled into GDSC (default: all foreground)");
  eval->add_option("--errormap", eval_errormap, "write the disagreement map");
  eval->add_option("--out", eval_out, "also write the report to this file");

  // ablate
  Common abl_c;
  std::vector<std::string> abl_drop;
  std::string abl_model, abl_data, abl_target, abl_atlases, abl_subjects, abl_out;
  auto* ablate = app.add_subcommand("ablate", "DLF with components removed");
  add_common(ablate, abl_c);
  ablate->add_option("--drop", abl_drop, "component to remove (repeatable)")
      ->required()
      ->check(CLI::IsMember({"wv", "ft", "mask"}));
  ablate->add_option("--model", abl_model, "trained DLF checkpoint (otherwise trained here if needed)")
      ->check(CLI::ExistingDirectory);
  ablate->add_option("--data", abl_data, "dataset directory")->required();
  ablate->add_option("--target", abl_target, "target subject id")->required();
  ablate->add_option("--atlases", abl_atlases, "comma-separated atlas ids (default: all others)");
  ablate->add_option("--subjects", abl_subjects, "training subjects when training is needed (default: the atlases)");
  ablate->add_option("--out", abl_out, "output label volume")->required();

  // ttest
  Common tt_c;
  std::string tt_x, tt_y, tt_out;
  auto* ttest = app.add_subcommand("ttest", "paired two-sided t-test");
  add_common(ttest, tt_c);
  ttest->add_option("--x", tt_x, "comma-separated values or a file of numbers")->required();
  ttest->add_option("--y", tt_y, "comma-separated values or a file of numbers")->required();
  ttest->add_option("--out", tt_out, "also write the result to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      const auto cfg = load_config(synth_c);
      const int workers = resolve_workers(synth_c.workers);
      const auto pc = cfg.phantom();
      Run run{"synth", joined, manifest_for(synth_c, synth_out, true), {cfg.to_text(), runconfig::describe(pc)}};
      const auto ids = synthlab::make_dataset(pc, synth_out, workers);
      run.write();
      std::cout << "subjects=" << ids.size() << "\n";
      return 0;
    }

    if (*fuse) {
      const auto cfg = load_config(fuse_c);
      const int workers = resolve_workers(fuse_c.workers);
      const auto d = open_dataset(fuse_data);
      const auto target = d.subject(fuse_target);
      const auto atl = load_atlases(d, atlas_ids(d, fuse_target, fuse_atlases), d.num_labels);
      Run run{"fuse", joined, manifest_for(fuse_c, fuse_out, false), {cfg.to_text()}};
      volcore::LabelMap result;
      if (fuse_method == "mv") {
        std::vector<volcore::LabelMap> cands;
        for (const auto& a : atl) cands.push_back(a.labels);
        result = classicfusion::majority_vote(cands);
      } else {
        auto p = cfg.fusion(fuse_method);
        p.workers = workers;
        run.sections.push_back(runconfig::describe(p));
        const auto image = synthlab::stack_modalities(target);
        auto r = fuse_method == "svwv" ? classicfusion::svwv(image, atl, p) : classicfusion::jlf(image, atl, p);
        if (r.fallback_voxels) std::cerr << "jlf: uniform-weight fallback at " << r.fallback_voxels << " voxels\n";
        result = std::move(r.labels);
      }
      volcore::write_labels(result, fuse_out);
      run.write();
      return 0;
    }

    if (*train) {
      const auto cfg = load_config(train_c);
      const int workers = resolve_workers(train_c.workers);
      const auto d = open_dataset(train_data);
      const auto ids = train_subjects.empty() ? d.ids : split_ids(train_subjects);
      Run run{"train", joined, manifest_for(train_c, train_out, true), {cfg.to_text()}};
      std::vector<double> trace;
      if (train_model == "dlf") {
        auto model = train_dlf_model(d, ids, cfg, cfg.dlf_model(d.num_labels), workers, run, &trace);
        model.save(train_out);
      } else {
        auto tc = cfg.train("unet");
        tc.workers = workers;
        run.sections.push_back(runconfig::describe(tc));
        const auto subs = load_subjects(d, ids);
        const auto data = trainer::build_training_set(subs, tc);
        auto r = trainer::train_unet(data, tc, trainer::unet_baseline_config(d.num_labels, tc.base_features),
                                     d.num_labels);
        trace = r.epoch_loss;
        trainer::save_unet(r.model, d.num_labels, train_out);
      }
      run.sections.push_back(loss_lines(trace));
      run.write();
      std::cout << loss_lines(trace);
      return 0;
    }

    if (*infer) {
      const auto cfg = load_config(infer_c);
      const int workers = resolve_workers(infer_c.workers);
      const auto d = open_dataset(infer_data);
      const auto target = d.subject(infer_target);
      const auto image = synthlab::stack_modalities(target);
      const auto tc = cfg.train(trainer::checkpoint_kind(infer_model));
      Run run{"infer", joined, manifest_for(infer_c, infer_out, false), {cfg.to_text()}};
      trainer::Prediction p;
      if (trainer::checkpoint_kind(infer_model) == "dlf") {
        auto model = deepfusion::DlfModel<float>::load(infer_model);
        const auto atl = load_atlases(d, atlas_ids(d, infer_target, infer_atlases), model.config().num_labels);
        p = trainer::infer_dlf(model, image, atl, tc.patch, cfg.infer_stride(), workers);
      } else {
        if (!infer_atlases.empty()) throw UsageError("--atlases is only valid for DLF checkpoints");
        int L = 0;
        auto net = trainer::load_unet(infer_model, &L);
        p = trainer::infer_unet(net, image, L, tc.patch, cfg.infer_stride(), workers);
      }
      if (infer_lcc) p.labels = evalkit::apply_mask(p.labels, evalkit::largest_cc_mask(p.labels));
      volcore::write_labels(p.labels, infer_out);
      if (!infer_logits.empty()) volcore::write_volume(p.logits, infer_logits);
      run.write();
      return 0;
    }

    if (*eval) {
      const auto cfg = load_config(eval_c);
      auto pred = volcore::read_labels(eval_pred);
      auto ref = volcore::read_labels(eval_ref);
      const int L = std::max(pred.num_labels(), ref.num_labels());
      pred = with_labels(std::move(pred), L);
      ref = with_labels(std::move(ref), L);
      std::vector<int> labels = eval_labels.empty() ? cfg.eval_labels() : std::vector<int>{};
      if (!eval_labels.empty())
        for (const auto& s : split_ids(eval_labels)) labels.push_back(std::stoi(s));
      const auto report = evalkit::format_report(evalkit::evaluate(pred, ref, labels));
      std::cout << report;
      if (!eval_errormap.empty()) volcore::write_volume(evalkit::errormap(pred, ref), eval_errormap);
      if (!eval_out.empty()) {
        std::ofstream out(eval_out, std::ios::trunc);
        out << report;
        if (!out) throw std::runtime_error("cannot write " + eval_out);
      }
      const fs::path m = !eval_c.manifest.empty() ? fs::path(eval_c.manifest)
                         : !eval_out.empty()      ? fs::path(eval_out + ".run.txt")
                                                  : fs::path("dlf_eval.run.txt");
      Run{"eval", joined, m, {cfg.to_text()}}.write();
      return 0;
    }

    if (*ablate) {
      const auto cfg = load_config(abl_c);
      const int workers = resolve_workers(abl_c.workers);
      const auto d = open_dataset(abl_data);
      const auto target = d.subject(abl_target);
      const auto ids = atlas_ids(d, abl_target, abl_atlases);
      Run run{"ablate", joined, manifest_for(abl_c, abl_out, false), {cfg.to_text()}};
      auto model_cfg = cfg.dlf_model(d.num_labels);
      std::optional<deepfusion::DlfModel<float>> model;
      if (!abl_model.empty()) model_cfg = deepfusion::DlfModel<float>::load(abl_model).config();
      for (const auto& c : abl_drop) {
        if (c == "wv") model_cfg.ablate_wv = true;
        if (c == "ft") model_cfg.ablate_ft = true;
        if (c == "mask") model_cfg.ablate_mask = true;
      }
      std::ostringstream switches;
      switches << "ablate.wv=" << model_cfg.ablate_wv << "\nablate.ft=" << model_cfg.ablate_ft
               << "\nablate.mask=" << model_cfg.ablate_mask << "\n";
      run.sections.push_back(switches.str());
      if (!abl_model.empty()) {
        // Same weights, components switched off at inference.
        model = deepfusion::DlfModel<float>(model_cfg, 0);
        const auto arrays = gridnet::load_checkpoint(abl_model);
        model->wv().import_arrays(arrays, "wv.");
        model->ft().import_arrays(arrays, "ft.");
      } else if (model_cfg.ablate_wv && model_cfg.ablate_ft) {
        model = deepfusion::DlfModel<float>(model_cfg, cfg.seed());
      } else {
        const auto subjects = abl_subjects.empty() ? ids : split_ids(abl_subjects);
        std::vector<double> trace;
        model = train_dlf_model(d, subjects, cfg, model_cfg, workers, run, &trace);
        run.sections.push_back(loss_lines(trace));
      }
      const auto atl = load_atlases(d, ids, model_cfg.num_labels);
      const auto tc = cfg.train("dlf");
      auto p = trainer::infer_dlf(*model, synthlab::stack_modalities(target), atl, tc.patch, cfg.infer_stride(), workers);
      volcore::write_labels(p.labels, abl_out);
      run.write();
      return 0;
    }

    if (*ttest) {
      const auto cfg = load_config(tt_c);
      const auto x = read_numbers(tt_x);
      const auto y = read_numbers(tt_y);
      if (x.size() != y.size()) throw UsageError("--x and --y need the same number of values");
      if (x.size() < 2) throw UsageError("the t-test needs at least 2 pairs");
      const auto r = evalkit::paired_ttest(x, y);
      std::ostringstream out;
      out.precision(12);
      out << "n=" << x.size() << "\ndf=" << r.df << "\nmean_diff=" << r.mean_diff << "\nmean_diff_pct="
          << 100.0 * r.mean_diff << "\nt=" << r.t << "\np=" << r.p << "\ndegenerate=" << r.degenerate << "\n";
      std::cout << out.str();
      if (!tt_out.empty()) {
        std::ofstream f(tt_out, std::ios::trunc);
        f << out.str();
        if (!f) throw std::runtime_error("cannot write " + tt_out);
      }
      const fs::path m = !tt_c.manifest.empty() ? fs::path(tt_c.manifest)
                         : !tt_out.empty()      ? fs::path(tt_out + ".run.txt")
                                                : fs::path("dlf_ttest.run.txt");
      Run{"ttest", joined, m, {cfg.to_text()}}.write();
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "dlf: " << e.what() << "\n";
    return 2;
  } catch (const runconfig::ConfigError& e) {
    std::cerr << "dlf: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dlf: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
