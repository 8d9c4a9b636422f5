#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "xdr/train/stage2.hpp"

using namespace xdr;
using namespace xdr::train;
namespace fs = std::filesystem;

namespace {

procgen::CorpusConfig tiny_corpus() {
  procgen::CorpusConfig c;
  c.image_size = 16;
  c.target_train = 96;
  c.target_test = 32;
  c.source_train_ids = 12;
  c.source_train_views = 4;
  c.eval_ids = 8;
  c.eval_views = 2;
  c.extractor_ids = 6;
  c.extractor_views = 8;
  return c;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.seed = 5;
  c.image_size = 16;
  c.codebook_size = 16;
  c.imitator.batch_size = 32;
  c.imitator.epochs = 3;
  c.extractor.batch_size = 12;
  c.extractor.max_epochs = 30;
  c.extractor.target_accuracy = 0.0;
  c.stage2.target_batch = 8;
  c.stage2.identities = 3;
  c.stage2.epochs = 4;
  c.stage2.steps_per_epoch = 2;
  c.stage2.checkpoint_every = 2;
  c.stage2.lr_halve_epochs = {2, 3};
  c.stage2.probe_images = 16;
  return c;
}

std::string file_bytes(const fs::path& p) { return read_text(p); }

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    log::quiet() = true;
    root_ = fs::path(::testing::TempDir()) / "xdr_trainer_test";
    fs::remove_all(root_);
    manifest_ = new procgen::Manifest(procgen::build_corpus(root_ / "corpus", tiny_corpus(), 3));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    fs::remove_all(root_);
  }
  static fs::path corpus() { return root_ / "corpus"; }

  static inline fs::path root_;
  static inline procgen::Manifest* manifest_ = nullptr;
};

TEST(TrainConfig, DefaultsRoundTripThroughJson) {
  const TrainConfig c;
  const Json j = config_json(c);
  EXPECT_EQ(config_json(parse_config(j)), j);
  EXPECT_EQ(parse_config(Json::object()).stage2.epochs, 60);
  EXPECT_DOUBLE_EQ(c.stage2.tau, 0.07);
  EXPECT_DOUBLE_EQ(c.weights.lambda1, 1.0);
  EXPECT_DOUBLE_EQ(c.weights.lambda2, 0.01);
  EXPECT_DOUBLE_EQ(c.weights.lambda3, 0.02);
  EXPECT_DOUBLE_EQ(c.weights.lambda4, 0.02);
  EXPECT_EQ(c.imitator.batch_size, 128);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config(Json{{"sede", 1}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"stage2", {{"tua", 0.1}}}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"stage2", {{"tau", 0.0}}}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"stage2", {{"lr_halve_epochs", {100, 50}}}}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"weights", {{"lambda2", -1.0}}}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"param_dim", 16}}), ValidationError);
  EXPECT_THROW(parse_config(Json{{"seed", "x"}}), ValidationError);
}

TEST(TrainConfig, LearningRateHalvesAfterEachMilestone) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(scheduled_lr(c.stage2.lr, c.stage2.lr_halve_epochs, 1), 3e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(c.stage2.lr, c.stage2.lr_halve_epochs, 50), 3e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(c.stage2.lr, c.stage2.lr_halve_epochs, 51), 1.5e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(c.stage2.lr, c.stage2.lr_halve_epochs, 101), 7.5e-5);
}

Checkpoint sample_checkpoint() {
  Rng rng(1);
  nn::Imitator<float> net(32, 16, 9);
  Adam<float> adam(net.parameters());
  for (auto* p : net.parameters()) p->grad.fill(0.5f);
  adam.step();
  return snapshot("imitator.state", 7, Json{{"k", 1}}, net.parameters(), &adam);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Checkpoint c = sample_checkpoint();
  const std::string a = encode_checkpoint(c);
  const Checkpoint d = decode_checkpoint(a);
  EXPECT_EQ(encode_checkpoint(d), a);
  EXPECT_EQ(d.epoch, 7u);
  EXPECT_EQ(d.adam_t, 1u);
  EXPECT_EQ(weights_digest(d.tensors), weights_digest(c.tensors));
  nn::Imitator<float> fresh(32, 16, 123);
  restore(fresh.parameters(), d);
  EXPECT_EQ(weights_digest(fresh.parameters()), weights_digest(c.tensors));
}

TEST(Checkpoint, RejectsCorruptionAndTruncation) {
  std::string a = encode_checkpoint(sample_checkpoint());
  std::string flipped = a;
  flipped[a.size() / 2] ^= 1;
  EXPECT_THROW(decode_checkpoint(flipped), ValidationError);
  EXPECT_THROW(decode_checkpoint(a.substr(0, a.size() - 1)), ValidationError);
  EXPECT_THROW(decode_checkpoint("not a checkpoint at all, clearly not, definitely"), ValidationError);
}

TEST(Checkpoint, RestoreRejectsLayoutMismatch) {
  const Checkpoint c = sample_checkpoint();
  nn::Imitator<float> other(32, 32, 1);
  EXPECT_THROW(restore(other.parameters(), c), ValidationError);
}

TEST(Checkpoint, VerifiedLoadRefusesDigestMismatch) {
  const fs::path dir = fs::path(::testing::TempDir()) / "xdr_ckpt_digest";
  fs::create_directories(dir);
  Checkpoint c = sample_checkpoint();
  c.kind = "imitator";
  save_verified(dir / "a.xckpt", c);
  EXPECT_NO_THROW(load_verified(dir / "a.xckpt", "imitator"));
  EXPECT_THROW(load_verified(dir / "a.xckpt", "extractor"), ValidationError);
  Json meta = read_json(dir / "a.json");
  meta["checkpoint_sha256"] = std::string(64, '0');
  write_json(dir / "a.json", meta);
  EXPECT_THROW(load_verified(dir / "a.xckpt", "imitator"), ValidationError);
  fs::remove_all(dir);
}

TEST_F(TrainerTest, Stage1WritesOneCsvRowPerEpochAndFreezes) {
  const TrainConfig cfg = tiny_config();
  const auto r = run_stage1(corpus(), *manifest_, cfg, root_ / "s1_full");
  ASSERT_TRUE(r.completed);
  ASSERT_EQ(r.history.size(), 3u);
  std::ifstream csv(root_ / "s1_full" / "imitator_loss.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 3 + 1);
  EXPECT_GT(r.baseline, 0);
  EXPECT_LT(r.history.back().heldout_mse, r.baseline);
  const nn::Imitator<float> net = load_imitator(root_ / "s1_full" / kImitatorFile);
  EXPECT_TRUE(const_cast<nn::Imitator<float>&>(net).frozen());
  EXPECT_FALSE(fs::exists(root_ / "s1_full" / kImitatorStateFile));
}

TEST_F(TrainerTest, Stage1ResumeReproducesUninterruptedRun) {
  const TrainConfig cfg = tiny_config();
  const auto full = run_stage1(corpus(), *manifest_, cfg, root_ / "s1_a");
  const auto part = run_stage1(corpus(), *manifest_, cfg, root_ / "s1_b", Stage1Options{.stop_after_epoch = 1});
  EXPECT_FALSE(part.completed);
  EXPECT_TRUE(fs::exists(root_ / "s1_b" / kImitatorStateFile));
  const auto resumed = run_stage1(corpus(), *manifest_, cfg, root_ / "s1_b");
  ASSERT_TRUE(resumed.completed);
  EXPECT_EQ(resumed.weights_digest, full.weights_digest);
  EXPECT_EQ(file_bytes(root_ / "s1_a" / "imitator_loss.csv"), file_bytes(root_ / "s1_b" / "imitator_loss.csv"));
  EXPECT_EQ(file_bytes(root_ / "s1_a" / kImitatorFile), file_bytes(root_ / "s1_b" / kImitatorFile));
}

TEST_F(TrainerTest, Stage1RefusesTamperedResumeState) {
  const TrainConfig cfg = tiny_config();
  const fs::path dir = root_ / "s1_tamper";
  run_stage1(corpus(), *manifest_, cfg, dir, Stage1Options{.stop_after_epoch = 1});
  std::string bytes = file_bytes(dir / kImitatorStateFile);
  bytes[bytes.size() / 3] ^= 0x10;
  write_atomic(dir / kImitatorStateFile, bytes);
  EXPECT_THROW(run_stage1(corpus(), *manifest_, cfg, dir), ValidationError);
}

TEST_F(TrainerTest, Stage1RefusesStateFromAnotherConfig) {
  TrainConfig cfg = tiny_config();
  const fs::path dir = root_ / "s1_other";
  run_stage1(corpus(), *manifest_, cfg, dir, Stage1Options{.stop_after_epoch = 1});
  cfg.imitator.lr *= 2;
  EXPECT_THROW(run_stage1(corpus(), *manifest_, cfg, dir), ValidationError);
}

TEST_F(TrainerTest, ExtractorTrainsFreezesAndReportsMargin) {
  const TrainConfig cfg = tiny_config();
  const auto r = run_extractor(corpus(), *manifest_, cfg, root_ / "ext");
  EXPECT_GE(r.epochs, 1);
  EXPECT_TRUE(std::isfinite(r.margin()));
  auto net = load_extractor(root_ / "ext" / kExtractorFile);
  EXPECT_TRUE(net.frozen());
  EXPECT_EQ(weights_digest(net.parameters()), r.weights_digest);
}

TEST_F(TrainerTest, ExtractorFailsLoudlyBelowTarget) {
  TrainConfig cfg = tiny_config();
  cfg.extractor.max_epochs = 1;
  cfg.extractor.target_accuracy = 1.0;
  try {
    run_extractor(corpus(), *manifest_, cfg, root_ / "ext_fail");
    FAIL() << "expected failure";
  } catch (const ValidationError&) {
    FAIL() << "should be a runtime failure";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("held-out accuracy"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(root_ / "ext_fail" / kExtractorFile));
}

TEST_F(TrainerTest, Stage2RequiresStageOneCheckpoint) {
  const TrainConfig cfg = tiny_config();
  try {
    run_stage2(corpus(), *manifest_, cfg, root_ / "nowhere" / kImitatorFile, root_ / "ext" / kExtractorFile,
               root_ / "s2_missing");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos);
  }
}

TEST(Ablation, ZeroesExactlyOneWeightAndRejectsRestored) {
  const LossWeights w;
  EXPECT_EQ(ablated_weights(w, "domain").lambda2, 0);
  EXPECT_EQ(ablated_weights(w, "contrastive").lambda3, 0);
  EXPECT_EQ(ablated_weights(w, "consistency").lambda4, 0);
  EXPECT_EQ(ablated_weights(w, "contrastive").lambda2, w.lambda2);
  EXPECT_THROW(ablated_weights(w, "restored"), ValidationError);
  EXPECT_THROW(ablated_weights(w, "param"), ValidationError);
  EXPECT_EQ(run_tag(""), "full");
  EXPECT_EQ(run_tag("contrastive"), "no_contrastive");
}

class Stage2Test : public TrainerTest {
 protected:
  static void SetUpTestSuite() {
    TrainerTest::SetUpTestSuite();
    const TrainConfig cfg = tiny_config();
    run_stage1(corpus(), *manifest_, cfg, root_ / "s1");
    run_extractor(corpus(), *manifest_, cfg, root_ / "s1");
  }
  static Stage2Result run(const std::string& out, const Stage2Options& o = {}) {
    return run_stage2(corpus(), *manifest_, tiny_config(), root_ / "s1" / kImitatorFile,
                      root_ / "s1" / kExtractorFile, root_ / out, o);
  }
};

std::vector<std::string> split(const std::string& row) {
  std::vector<std::string> out;
  std::stringstream ss(row);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

TEST_F(Stage2Test, LogsEveryStepWithTotalEqualToWeightedSum) {
  const auto r = run("s2_log");
  ASSERT_TRUE(r.completed);
  ASSERT_EQ(r.csv_rows.size(), 8u);
  const LossWeights w;
  for (const auto& row : r.csv_rows) {
    const auto f = split(row);
    ASSERT_EQ(f.size(), 11u);
    const double restored = std::stod(f[2]), domain = std::stod(f[5]), contrastive = std::stod(f[6]),
                 l3d = std::stod(f[7]), lid = std::stod(f[8]), total = std::stod(f[9]);
    EXPECT_NEAR(total, w.lambda1 * restored + w.lambda2 * domain + w.lambda3 * contrastive + w.lambda4 * (l3d + lid),
                1e-6);
    const int epoch = std::stoi(f[1]);
    EXPECT_DOUBLE_EQ(std::stod(f[10]), scheduled_lr(3e-4, {2, 3}, epoch));
  }
  ASSERT_EQ(r.probes.size(), 3u);
  EXPECT_EQ(r.probes[0].epoch, 0);
  EXPECT_EQ(r.probes[2].epoch, 4);
  for (const auto& p : r.epoch_checkpoints) EXPECT_TRUE(fs::exists(p)) << p;
  const std::string header = file_bytes(r.dir / "loss.csv").substr(0, std::string(kStage2Header).size());
  EXPECT_EQ(header, kStage2Header);
}

TEST_F(Stage2Test, FrozenNetworksAreUntouched) {
  const std::string imit_before = file_bytes(root_ / "s1" / kImitatorFile);
  const std::string ext_before = file_bytes(root_ / "s1" / kExtractorFile);
  const auto r = run("s2_frozen");
  EXPECT_EQ(file_bytes(root_ / "s1" / kImitatorFile), imit_before);
  EXPECT_EQ(file_bytes(root_ / "s1" / kExtractorFile), ext_before);
  auto imitator = load_imitator(root_ / "s1" / kImitatorFile);
  EXPECT_EQ(weights_digest(imitator.parameters()), r.imitator_digest);
}

TEST_F(Stage2Test, ResumeReproducesUninterruptedRun) {
  const auto full = run("s2_a");
  const auto part = run("s2_b", Stage2Options{.ablate = "", .stop_after_epoch = 2});
  EXPECT_FALSE(part.completed);
  const auto resumed = run("s2_b");
  ASSERT_TRUE(resumed.completed);
  EXPECT_EQ(file_bytes(full.checkpoint), file_bytes(resumed.checkpoint));
  EXPECT_EQ(file_bytes(full.dir / "loss.csv"), file_bytes(resumed.dir / "loss.csv"));
}

TEST_F(Stage2Test, AblationWritesTaggedDirectory) {
  const auto r = run("s2_abl", Stage2Options{.ablate = "contrastive"});
  EXPECT_EQ(r.dir.filename(), "no_contrastive");
  EXPECT_TRUE(fs::exists(r.dir / kPerceptionFile));
  const Json m = read_json(r.dir / "stage2_metrics.json");
  EXPECT_EQ(m["weights"]["lambda3"].get<double>(), 0.0);
  EXPECT_THROW(run("s2_abl", Stage2Options{.ablate = "restored"}), ValidationError);
}

TEST_F(Stage2Test, ZeroContrastiveWeightRemovesItsGradient) {
  // With lambda3 = 0 the parameter gradient cannot depend on tau, which
  // only enters through the contrastive term.
  auto imitator = load_imitator(root_ / "s1" / kImitatorFile);
  auto idnet = load_extractor(root_ / "s1" / kExtractorFile);
  const TargetSet t = load_target(corpus(), *manifest_, "train");
  const SourceSet s = load_source(corpus(), *manifest_, "train");
  const nn::GeometryMaps<float> maps(16, 16);
  StepBatch<float> batch{t.images.batch<float>({0, 1, 2, 3}), s.images.batch<float>({0, 1, 4, 5, 8, 9}), 3};
  const LossWeights w = ablated_weights(LossWeights{}, "contrastive");
  auto grads = [&](double tau) {
    auto net = make_perception(tiny_config());
    Graph<float> g;
    auto obj = full_objective(g, batch, net, imitator, idnet, maps, w, KernelSpec::median(), tau);
    g.backward(obj.total);
    std::vector<float> out;
    for (auto* p : net.parameters()) out.insert(out.end(), p->grad.values().begin(), p->grad.values().end());
    return std::pair{out, obj.report.contrastive};
  };
  const auto [a, ca] = grads(0.07);
  const auto [b, cb] = grads(0.5);
  EXPECT_NE(ca, cb);
  EXPECT_EQ(a, b);
}

TEST_F(Stage2Test, EpochOneLossesAreDeterministic) {
  const auto a = run("s2_det_a");
  const auto b = run("s2_det_b");
  ASSERT_GE(a.csv_rows.size(), 2u);
  EXPECT_EQ(a.csv_rows[0], b.csv_rows[0]);
  EXPECT_EQ(a.csv_rows[1], b.csv_rows[1]);
}

}  // namespace
