#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "lddpm/cli_config.hpp"
#include "lddpm/image_io.hpp"

using namespace lddpm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "lddpm_cli_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunConfig tiny(const fs::path& out) {
  RunConfig c;
  c.merge_text(R"(
model.inner_channel = 8
model.channel_multipliers = 1,2
model.attention_levels = 1
model.num_heads = 2
model.context_dim = 16
model.cvae_hidden = 8
model.gan = true
model.disc_channels = 8
model.disc_blocks = 2
diffusion.steps = 20
train.hr_size = 16
train.batch_size = 2
train.epochs = 2
train.checkpoint_every = 0
train.log_every = 0
data.synthetic = 4
loss.tap = 2,1
seed = 5
)");
  c.set("out", out.string());
  return c;
}

void write_textures(const fs::path& dir, int n, int size, std::uint64_t seed) {
  fs::create_directories(dir);
  for (int k = 0; k < n; ++k) write_png(dir / ("img" + std::to_string(k) + ".png"), synthetic_image(seed, k, size, 3));
}

}  // namespace

TEST_CASE("config text parsing") {
  RunConfig c;
  c.merge_text("# comment\n  train.batch_size = 16   # trailing\n\nmodel.variant=V2\nmodel.attention_levels =\n");
  CHECK(c.get_int("train.batch_size") == 16);
  CHECK(c.get("model.variant") == "V2");
  CHECK(c.get_int_list("model.attention_levels").empty());
  CHECK(c.get_int_list("model.channel_multipliers") == std::vector<int>{1, 2, 4});

  CHECK_THROWS_AS(c.merge_text("train.batch_sise = 3"), ConfigError);
  CHECK_THROWS_AS(c.merge_text("just words"), ConfigError);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
  try {
    c.merge_text("seed = 1\n\nmystery = 2\n", "my.cfg");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:3") != std::string::npos);
    CHECK(std::string(e.what()).find("mystery") != std::string::npos);
  }

  c.set("train.batch_size", "x");
  CHECK_THROWS_AS(c.get_int("train.batch_size"), ConfigError);
  c.set("model.gan", "maybe");
  CHECK_THROWS_AS(c.get_bool("model.gan"), ConfigError);
  c.set("optim.base_lr", "1e-4x");
  CHECK_THROWS_AS(c.get_double("optim.base_lr"), ConfigError);
}

TEST_CASE("resolved config reproduces itself") {
  RunConfig c;
  c.merge_text("optim.base_lr = 3e-05\nmodel.layer_scale = 1e-06\nmodel.dropout = 0.2\nseed = 18446744073709551615\n");
  const std::string text = c.to_text();
  RunConfig d;
  d.merge_text(text);
  CHECK(d.to_text() == text);
  CHECK(d.train_config().hash() == c.train_config().hash());
  CHECK(c.train_config().optim.base_lr == 3e-05);
  CHECK(c.train_config().model.dropout == 0.2f);
  CHECK(c.train_config().seed == 18446744073709551615ULL);
  // Defaults agree with the library structs.
  CHECK(RunConfig().train_config().hash() == TrainConfig().hash());
}

TEST_CASE("config validation errors") {
  RunConfig c;
  c.set("model.variant", "V9");
  CHECK_THROWS_AS(c.train_config(), ConfigError);
  c = RunConfig();
  c.set("model.variant", "V1");
  c.set("model.flow", "true");
  CHECK_THROWS_AS(c.train_config(), ConfigError);
  c = RunConfig();
  c.set("diffusion.schedule", "quadratic");
  CHECK_THROWS_AS(c.train_config(), ConfigError);
  c = RunConfig();
  c.set("loss.tap", "5");
  CHECK_THROWS_AS(c.train_config(), ConfigError);
  c = RunConfig();
  c.set("data.profile", "dreamy");
  CHECK_THROWS_AS(c.dataset_options(), ConfigError);
  c = RunConfig();
  c.set("data.jpeg_max", "101");
  CHECK_THROWS_AS(c.realistic_ranges(), ConfigError);
}

TEST_CASE("train command: exit codes, epochs 0, split-run resume") {
  std::ostringstream log;
  const fs::path root = fresh_dir("train");

  RunConfig zero = tiny(root / "zero");
  zero.set("train.epochs", "0");
  CHECK(cmd_train(zero, false, log) == kExitOk);
  CHECK(fs::exists(root / "zero" / "config.resolved"));
  CHECK_FALSE(fs::exists(root / "zero" / "loss.csv"));
  RunConfig echoed;
  echoed.merge_text(slurp(root / "zero" / "config.resolved"));
  CHECK(echoed.to_text() == zero.to_text());

  RunConfig missing = tiny(root / "missing");
  missing.set("data.dir", (root / "does_not_exist").string());
  CHECK(cmd_train(missing, false, log) == kExitUsage);
  RunConfig bad = tiny(root / "bad");
  bad.set("model.inner_channel", "-3");
  CHECK(cmd_train(bad, false, log) == kExitUsage);

  // 4 images, batch 2, 2 epochs: 4 steps.
  const RunConfig full = tiny(root / "full");
  REQUIRE(cmd_train(full, false, log) == kExitOk);
  const std::string csv = slurp(root / "full" / "loss.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "step,ddpm,kl,adv_g,adv_d,content,style,flow,total,lr");
  int rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  CHECK(rows == 4);

  RunConfig part = tiny(root / "split");
  part.set("train.max_steps", "2");
  REQUIRE(cmd_train(part, false, log) == kExitOk);
  CHECK(read_checkpoint(root / "split" / "checkpoint.ckpt").step == 2);
  fs::copy_file(root / "split" / "checkpoint.ckpt", root / "mid.ckpt");
  RunConfig rest = tiny(root / "split");
  rest.set("train.resume", (root / "mid.ckpt").string());
  REQUIRE(cmd_train(rest, false, log) == kExitOk);
  CHECK(read_checkpoint(root / "split" / "checkpoint.ckpt").step == 4);
  CHECK(slurp(root / "split" / "loss.csv") == csv);
  CHECK(slurp(root / "split" / "checkpoint.ckpt") == slurp(root / "full" / "checkpoint.ckpt"));

  RunConfig other = tiny(root / "other");
  other.set("optim.base_lr", "0.5");
  other.set("train.resume", (root / "mid.ckpt").string());
  CHECK(cmd_train(other, false, log) == kExitUsage);
  CHECK(cmd_train(other, true, log) == kExitOk);
}

TEST_CASE("sample, eval and degrade commands") {
  std::ostringstream log;
  const fs::path root = fresh_dir("infer");
  const fs::path hr = root / "hr";
  write_textures(hr, 2, 16, 77);

  // Degrade: clean profile is pure bicubic; one manifest line per image; reproducible.
  RunConfig dg = tiny(root / "lr");
  dg.set("degrade.hr_dir", hr.string());
  REQUIRE(cmd_degrade(dg, log) == kExitOk);
  const std::string manifest = slurp(root / "lr" / "manifest.tsv");
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 2);
  CHECK(manifest.find("resize=bicubic") != std::string::npos);
  const Tensor src = read_png(hr / "img0.png");
  const Tensor lr0 = read_png(root / "lr" / "img0.png");
  const Tensor ref = bicubic_resize(src, 8, 8);
  CHECK(lr0.shape() == ref.shape());
  double max_err = 0.0;
  for (std::int64_t i = 0; i < ref.size(); ++i) {
    max_err = std::max(max_err, static_cast<double>(std::abs(std::clamp(ref[i], 0.0f, 1.0f) - lr0[i])));
  }
  CHECK(max_err <= 0.5 / 255.0 + 1e-6);
  RunConfig dg2 = dg;
  dg2.set("out", (root / "lr2").string());
  REQUIRE(cmd_degrade(dg2, log) == kExitOk);
  CHECK(slurp(root / "lr2" / "img1.png") == slurp(root / "lr" / "img1.png"));
  CHECK(slurp(root / "lr2" / "manifest.tsv") == manifest);

  // Sample from a briefly trained model.
  RunConfig tr = tiny(root / "run");
  tr.set("train.epochs", "1");
  REQUIRE(cmd_train(tr, false, log) == kExitOk);
  RunConfig sp = tiny(root / "sr");
  sp.set("sample.checkpoint", (root / "run" / "checkpoint.ckpt").string());
  sp.set("sample.lr_dir", (root / "lr").string());
  sp.set("sample.steps", "4");
  REQUIRE(cmd_sample(sp, false, log) == kExitOk);
  CHECK(read_png(root / "sr" / "img0.png").shape() == Shape{3, 16, 16});
  CHECK(fs::exists(root / "sr" / "img1.png"));
  CHECK(log.str().find("time\timg0.png\t4 steps") != std::string::npos);
  RunConfig sp2 = sp;
  sp2.set("out", (root / "sr2").string());
  REQUIRE(cmd_sample(sp2, false, log) == kExitOk);
  CHECK(slurp(root / "sr2" / "img0.png") == slurp(root / "sr" / "img0.png"));
  RunConfig sp3 = sp;
  sp3.set("sample.checkpoint", (root / "absent.ckpt").string());
  CHECK(cmd_sample(sp3, false, log) == kExitUsage);
  sp3 = sp;
  sp3.set("sample.steps", "21");
  CHECK(cmd_sample(sp3, false, log) == kExitUsage);

  // Eval.
  RunConfig ev = tiny(root / "ev");
  ev.set("eval.pred_dir", hr.string());
  ev.set("eval.ref_dir", hr.string());
  ev.set("eval.histogram", "true");
  REQUIRE(cmd_eval(ev, log) == kExitOk);
  const std::string tsv = slurp(root / "ev" / "metrics.tsv");
  CHECK(tsv.find("img0.png\t100\t1") != std::string::npos);
  CHECK(fs::exists(root / "ev" / "histogram.csv"));
  CHECK(fs::exists(root / "ev" / "report.txt"));

  const fs::path empty = root / "empty";
  fs::create_directories(empty);
  ev.set("eval.pred_dir", empty.string());
  ev.set("eval.ref_dir", empty.string());
  CHECK(cmd_eval(ev, log) == kExitUsage);
  const fs::path partial = root / "partial";
  write_textures(partial, 1, 16, 77);
  ev.set("eval.pred_dir", partial.string());
  ev.set("eval.ref_dir", hr.string());
  CHECK(cmd_eval(ev, log) == kExitUsage);
}
