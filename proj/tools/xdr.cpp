// xdr: command-line driver for corpus generation, training and evaluation.
//
// Exit codes: 0 success, 1 invalid invocation / input / missing artifact,
// 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "xdr/eval/evaluate.hpp"
#include "xdr/eval/export.hpp"
#include "xdr/eval/reconstruct.hpp"
#include "xdr/train/stage2.hpp"

namespace fs = std::filesystem;
using namespace xdr;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

train::TrainConfig load_train_config(const Common& c) {
  train::TrainConfig cfg = c.config.empty() ? train::TrainConfig{} : train::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

procgen::Manifest require_corpus(const fs::path& dir) {
  if (!fs::exists(dir / procgen::kManifestName))
    throw ValidationError("no corpus manifest in " + dir.string() + " (run: xdr gen-data --out " + dir.string() + ")");
  return procgen::load_manifest(dir);
}

void require_file(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::exists(p)) throw ValidationError("missing " + what + " " + p.string() + " (" + hint + ")");
}

Json file_digest(const fs::path& p) { return Json{{"path", p.string()}, {"sha256", sha256_file(p)}}; }

/// Records what a run consumed and produced so it can be replayed.
void write_run_manifest(const fs::path& out_dir, const std::string& command, const std::vector<std::string>& argv,
                        Json config, Json inputs, Json outputs) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  write_json(out_dir / ("run_" + command + ".json"), Json{{"command", command},
                                                          {"argv", argv},
                                                          {"finished_utc", stamp},
                                                          {"config", std::move(config)},
                                                          {"inputs", std::move(inputs)},
                                                          {"outputs", std::move(outputs)}});
}

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config)
    cmd->add_option("--config", c.config, "JSON config file (missing keys take defaults)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_flag("--quiet", c.quiet, "suppress progress output");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"xdr: cross-domain parameter regression (procedural faces)"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  Common common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render the target and source corpora");
  std::string gen_out;
  gen->add_option("--out", gen_out, "corpus directory")->required();
  add_common(gen, common);

  // train-imitator
  auto* ti = app.add_subcommand("train-imitator", "stage 1: train the imitator on the target corpus");
  std::string ti_data, ti_out;
  int ti_stop = 0;
  ti->add_option("--data", ti_data, "corpus directory")->required();
  ti->add_option("--out", ti_out, "output directory")->required();
  ti->add_option("--stop-after-epoch", ti_stop, "stop early after this epoch (resume by re-running)");
  add_common(ti, common);

  // train-extractor
  auto* te = app.add_subcommand("train-extractor", "train and freeze the identity embedding network");
  std::string te_data, te_out;
  te->add_option("--data", te_data, "corpus directory")->required();
  te->add_option("--out", te_out, "output directory")->required();
  add_common(te, common);

  // train
  auto* tr = app.add_subcommand("train", "stage 2: train encoder, codebooks and regressor");
  std::string tr_data, tr_out, tr_imitator, tr_extractor, tr_ablate;
  int tr_stop = 0;
  tr->add_option("--data", tr_data, "corpus directory")->required();
  tr->add_option("--imitator", tr_imitator, "frozen imitator checkpoint from train-imitator")->required();
  tr->add_option("--extractor", tr_extractor, "frozen identity extractor checkpoint from train-extractor")->required();
  tr->add_option("--out", tr_out, "output root; the run goes to <out>/full or <out>/no_<ablate>")->required();
  tr->add_option("--ablate", tr_ablate, "disable one loss")->check(CLI::IsMember({"domain", "contrastive", "consistency"}));
  tr->add_option("--stop-after-epoch", tr_stop, "stop at the first checkpoint epoch >= N (resume by re-running)");
  add_common(tr, common);

  // eval
  auto* ev = app.add_subcommand("eval", "verification accuracy, masked robustness and optional throughput");
  std::string ev_data, ev_ckpt, ev_out;
  std::vector<std::string> ev_trend;
  bool ev_bench = false;
  ev->add_option("--data", ev_data, "corpus directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "perception checkpoint")->required();
  ev->add_option("--out", ev_out, "report JSON path")->required();
  ev->add_option("--trend", ev_trend, "epoch checkpoints (in order) for the parameter MMD trend");
  ev->add_flag("--bench", ev_bench, "also run the throughput benchmark");
  add_common(ev, common, false);

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "regress parameters for one image and render them");
  std::string rc_ckpt, rc_imitator, rc_image, rc_out;
  rc->add_option("--checkpoint", rc_ckpt, "perception checkpoint")->required();
  rc->add_option("--imitator", rc_imitator, "imitator checkpoint")->required();
  rc->add_option("--image", rc_image, "input PPM (P6, size matching the model)")->required();
  rc->add_option("--out", rc_out, "output directory")->required();
  add_common(rc, common, false);

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "write source/target parameter CSVs per checkpoint");
  std::string ex_data, ex_out;
  std::vector<std::string> ex_ckpts;
  ex->add_option("--data", ex_data, "corpus directory")->required();
  ex->add_option("--checkpoints", ex_ckpts, "perception checkpoints")->required();
  ex->add_option("--out", ex_out, "output directory")->required();
  add_common(ex, common, false);

  // bench
  auto* bn = app.add_subcommand("bench", "inference throughput at batch 1 and 64");
  std::string bn_ckpt, bn_out;
  bn->add_option("--checkpoint", bn_ckpt, "perception checkpoint")->required();
  bn->add_option("--out", bn_out, "report JSON path");
  add_common(bn, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  log::quiet() = common.quiet;

  try {
    if (*gen) {
      procgen::CorpusConfig cfg;
      if (!common.config.empty()) cfg = read_json(common.config).get<procgen::CorpusConfig>();
      const std::uint64_t seed = common.seed.value_or(1);
      log::info("gen-data: rendering corpus into " + gen_out);
      const auto m = procgen::build_corpus(gen_out, cfg, seed);
      std::cout << "content_digest " << m.content_digest << "\n";
      write_run_manifest(gen_out, "gen-data", args, Json{{"corpus", cfg}, {"seed", seed}}, Json::object(),
                         Json{{"content_digest", m.content_digest}, {"manifest", file_digest(fs::path(gen_out) / procgen::kManifestName)}});
    } else if (*ti) {
      const auto cfg = load_train_config(common);
      const auto m = require_corpus(ti_data);
      const auto r = train::run_stage1(ti_data, m, cfg, ti_out, train::Stage1Options{.stop_after_epoch = ti_stop});
      if (!r.completed) {
        std::cout << "stopped after epoch " << r.history.size() << "; re-run to resume\n";
        return 0;
      }
      std::cout << "held-out mse " << r.history.back().heldout_mse << " (untrained " << r.baseline << ")\n";
      write_run_manifest(ti_out, "train-imitator", args, train::config_json(cfg),
                         Json{{"corpus_digest", m.content_digest}},
                         Json{{"imitator", file_digest(r.checkpoint)}, {"weights_digest", r.weights_digest}});
    } else if (*te) {
      const auto cfg = load_train_config(common);
      const auto m = require_corpus(te_data);
      const auto r = train::run_extractor(te_data, m, cfg, te_out);
      std::cout << "held-out accuracy " << r.accuracy << " margin " << r.margin() << "\n";
      write_run_manifest(te_out, "train-extractor", args, train::config_json(cfg),
                         Json{{"corpus_digest", m.content_digest}},
                         Json{{"extractor", file_digest(r.checkpoint)}, {"weights_digest", r.weights_digest}});
    } else if (*tr) {
      const auto cfg = load_train_config(common);
      const auto m = require_corpus(tr_data);
      require_file(tr_imitator, "imitator checkpoint", "stage 1 prerequisite: run xdr train-imitator first");
      require_file(tr_extractor, "identity extractor checkpoint", "run xdr train-extractor first");
      const auto r = train::run_stage2(tr_data, m, cfg, tr_imitator, tr_extractor, tr_out,
                                       train::Stage2Options{.ablate = tr_ablate, .stop_after_epoch = tr_stop});
      if (!r.completed) {
        std::cout << "stopped at a checkpoint; re-run to resume\n";
        return 0;
      }
      std::cout << "run " << r.tag << " -> " << r.checkpoint.string() << "\n";
      write_run_manifest(r.dir, "train", args, train::config_json(cfg),
                         Json{{"corpus_digest", m.content_digest},
                              {"imitator", file_digest(tr_imitator)},
                              {"extractor", file_digest(tr_extractor)},
                              {"ablate", tr_ablate}},
                         Json{{"perception", file_digest(r.checkpoint)}});
    } else if (*ev) {
      const auto m = require_corpus(ev_data);
      require_file(ev_ckpt, "perception checkpoint", "run xdr train first");
      eval::EvalOptions opts;
      opts.bench = ev_bench;
      for (const auto& p : ev_trend) opts.trend_checkpoints.push_back(p);
      const Json report = eval::evaluate(ev_data, m, ev_ckpt, opts);
      write_json(ev_out, report);
      std::cout << "accuracy " << report["accuracy"] << " mean_drop " << report["mean_drop"] << "\n";
      write_run_manifest(fs::path(ev_out).parent_path().empty() ? fs::path(".") : fs::path(ev_out).parent_path(),
                         "eval", args, Json{{"bench", ev_bench}, {"trend", ev_trend}},
                         Json{{"corpus_digest", m.content_digest}, {"perception", file_digest(ev_ckpt)}},
                         Json{{"report", file_digest(ev_out)}});
    } else if (*rc) {
      require_file(rc_ckpt, "perception checkpoint", "run xdr train first");
      require_file(rc_imitator, "imitator checkpoint", "run xdr train-imitator first");
      require_file(rc_image, "image", "expected a binary PPM");
      auto net = train::load_perception(rc_ckpt);
      auto imitator = train::load_imitator(rc_imitator);
      const auto r = eval::reconstruct(net, imitator, procgen::read_ppm(rc_image));
      const fs::path out(rc_out);
      eval::write_reconstruction(out, r);
      std::cout << "wrote " << (out / "params.json").string() << "\n";
      write_run_manifest(out, "reconstruct", args, Json::object(),
                         Json{{"perception", file_digest(rc_ckpt)}, {"imitator", file_digest(rc_imitator)},
                              {"image", file_digest(rc_image)}},
                         Json{{"params", file_digest(out / "params.json")},
                              {"engine", file_digest(out / "engine.ppm")},
                              {"imitator", file_digest(out / "imitator.ppm")}});
    } else if (*ex) {
      const auto m = require_corpus(ex_data);
      std::vector<fs::path> ckpts(ex_ckpts.begin(), ex_ckpts.end());
      for (const auto& c : ckpts) require_file(c, "perception checkpoint", "run xdr train first");
      const Json summary = eval::export_embeddings(ex_data, m, ckpts, ex_out);
      std::cout << summary.dump(2) << "\n";
      Json inputs{{"corpus_digest", m.content_digest}, {"checkpoints", Json::array()}};
      for (const auto& c : ckpts) inputs["checkpoints"].push_back(file_digest(c));
      write_run_manifest(ex_out, "export-embeddings", args, Json::object(), inputs, summary);
    } else if (*bn) {
      require_file(bn_ckpt, "perception checkpoint", "run xdr train first");
      auto net = train::load_perception(bn_ckpt);
      const Json report = eval::throughput_json(eval::throughput_bench(net));
      std::cout << report.dump(2) << "\n";
      if (!bn_out.empty()) {
        write_json(bn_out, report);
        const fs::path dir = fs::path(bn_out).parent_path().empty() ? fs::path(".") : fs::path(bn_out).parent_path();
        write_run_manifest(dir, "bench", args, Json::object(), Json{{"perception", file_digest(bn_ckpt)}},
                           Json{{"report", file_digest(bn_out)}});
      }
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
