#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dps/checkpoint.hpp"
#include "dps/trainer.hpp"
#include "test_util.hpp"

using namespace dps;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.net.channels = 8;
  cfg.net.heads = 2;
  cfg.net.patches = 2;
  cfg.net.refpoints = 2;
  cfg.net.input_h = cfg.net.input_w = 64;
  cfg.net.stage_channels = {4, 6, 8, 10};
  cfg.batch_size = 2;
  cfg.epochs = 2;
  cfg.seed = 11;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-4, 1e-5) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(cosine_lr(100, 100, 1e-4, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-4, 1e-5) == doctest::Approx((1e-4 + 1e-5) / 2).epsilon(1e-12));
  // past the end clamps to lr_end
  CHECK(cosine_lr(150, 100, 1e-4, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged, moments decay") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5});
  std::vector<Tensor*> params{&p};
  Adam adam;
  adam.init({3});
  std::vector<std::vector<real>> zero{{0, 0, 0}};
  const std::vector<real> before = p.values();
  for (int i = 0; i < 5; ++i) adam.step(params, zero, 1e-3);
  CHECK(p.values() == before);
  for (auto v : adam.m[0]) CHECK(v == 0.0);
  for (auto v : adam.v[0]) CHECK(v == 0.0);
}

TEST_CASE("adam: first step matches the hand-computed scalar trace") {
  // single parameter w=1, gradient g=0.3, lr=0.01, defaults
  Tensor p = Tensor::from({1}, {1.0});
  std::vector<Tensor*> params{&p};
  Adam adam;
  adam.init({1});
  adam.step(params, {{0.3}}, 0.01);
  // m = 0.1*0.3 = 0.03 ; v = 0.001*0.09 = 9e-5
  // mhat = 0.03/0.1 = 0.3 ; vhat = 9e-5/0.001 = 0.09
  // w -= 0.01 * 0.3 / (0.3 + 1e-8)
  const double expect = 1.0 - 0.01 * 0.3 / (std::sqrt(0.09) + 1e-8);
  CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(adam.m[0][0] == doctest::Approx(0.03).epsilon(1e-12));
  CHECK(adam.v[0][0] == doctest::Approx(9e-5).epsilon(1e-12));
}

TEST_CASE("adam: deterministic across identical runs") {
  auto run = [] {
    CounterRng rng(5);
    Tensor p = Tensor::uniform({16}, rng, -1, 1);
    std::vector<Tensor*> params{&p};
    Adam adam;
    adam.init({16});
    CounterRng grng(9);
    for (int s = 0; s < 10; ++s) {
      std::vector<real> g(16);
      for (auto& v : g) v = static_cast<real>(grng.uniform(-1, 1));
      adam.step(params, {g}, 1e-2);
    }
    return p.values();
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(real)) == 0);
}

TEST_CASE("train: epochs=0 yields a valid checkpoint of initialized weights") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dps_train0";
  fs::remove_all(dir);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  auto data = generate_dataset(cfg.seed, 2, 64, 64, 0.5);
  TrainOutput out = train_on(cfg, data, {}, dir.string());
  CHECK(out.steps.empty());
  CHECK(fs::exists(dir / "final.ckpt"));
  // log exists with only the header
  std::string log = read_file((dir / "train_log.csv").string());
  CHECK(log == "epoch,step,lr,wbce,wiou,bbce,total\n");
  LoadedCheckpoint lc = load_checkpoint((dir / "final.ckpt").string());
  // parameters equal the deterministic initialization
  CounterRng init = CounterRng(cfg.seed).fork(1);
  DpsNet fresh(cfg.net, init);
  std::vector<Tensor*> a, b;
  fresh.params([&](const std::string&, Tensor& t) { a.push_back(&t); });
  lc.net.params([&](const std::string&, Tensor& t) { b.push_back(&t); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->values() == b[i]->values());
  fs::remove_all(dir);
}

TEST_CASE("train: identical config and seed give byte-identical checkpoints") {
  namespace fs = std::filesystem;
  const fs::path d1 = fs::temp_directory_path() / "dps_train_det1";
  const fs::path d2 = fs::temp_directory_path() / "dps_train_det2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  TrainConfig cfg = tiny_config();
  auto data = generate_dataset(cfg.seed, 4, 64, 64, 0.5);
  train_on(cfg, data, {}, d1.string());
  train_on(cfg, data, {}, d2.string());
  const std::string c1 = read_file((d1 / "final.ckpt").string());
  const std::string c2 = read_file((d2 / "final.ckpt").string());
  CHECK(c1.size() > 0);
  CHECK(c1 == c2);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  TrainConfig cfg = tiny_config();
  CounterRng rng(cfg.seed);
  CounterRng init = rng.fork(1);
  DpsNet net(cfg.net, init);
  Adam adam;
  std::vector<std::int64_t> sizes;
  net.params([&](const std::string&, Tensor& t) { sizes.push_back(t.numel()); });
  adam.init(sizes);
  // perturb moments so the round trip covers them too
  CounterRng r2(77);
  for (auto& buf : adam.m)
    for (auto& v : buf) v = static_cast<real>(r2.uniform(-1, 1));
  adam.step_count = 42;

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dps_ckpt";
  fs::create_directories(dir);
  const std::string p1 = (dir / "a.ckpt").string();
  save_checkpoint(p1, cfg, net, adam);
  LoadedCheckpoint lc = load_checkpoint(p1);
  CHECK(lc.adam.step_count == 42);
  const std::string p2 = (dir / "b.ckpt").string();
  save_checkpoint(p2, lc.cfg, lc.net, lc.adam);
  CHECK(read_file(p1) == read_file(p2));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: corrupted magic and version are distinct errors") {
  TrainConfig cfg = tiny_config();
  CounterRng init = CounterRng(cfg.seed).fork(1);
  DpsNet net(cfg.net, init);
  Adam adam;
  std::string blob = serialize_checkpoint(cfg, net, adam);
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dps_ckpt_bad";
  fs::create_directories(dir);
  {
    std::string bad = blob;
    bad[0] = 'X';
    std::ofstream f(dir / "bad_magic.ckpt", std::ios::binary);
    f.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  try {
    load_checkpoint((dir / "bad_magic.ckpt").string());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("not a DPSNETCK") != std::string::npos);
  }
  {
    std::string bad = blob;
    bad[8] = 9;  // version little-endian low byte
    std::ofstream f(dir / "bad_version.ckpt", std::ios::binary);
    f.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  try {
    load_checkpoint((dir / "bad_version.ckpt").string());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("config: parse/serialize round trip and errors") {
  TrainConfig cfg = tiny_config();
  cfg.lr_start = 3e-4;
  cfg.net.offset_bound = 0.75;
  cfg.net.use_bfm = false;
  const std::string text = serialize_config(cfg);
  TrainConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.lr_start == cfg.lr_start);
  CHECK(back.net.offset_bound == cfg.net.offset_bound);
  CHECK(back.net.use_bfm == false);

  CHECK_THROWS_AS(parse_config_text("unknown_key = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("epochs\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("epochs = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("lr_start = 1e-5\nlr_end = 1e-4\n"), ConfigError);
  // comments and blank lines are fine
  TrainConfig ok = parse_config_text("# hello\n\nepochs = 3 # trailing\n");
  CHECK(ok.epochs == 3);
}

TEST_CASE("train: loss decreases on a tiny overfit and metrics evaluate") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 6;
  cfg.batch_size = 2;
  cfg.lr_start = 1e-3;
  cfg.lr_end = 1e-4;
  cfg.synth_difficulty = 0.2;
  auto data = generate_dataset(5, 2, 64, 64, 0.2);
  TrainOutput out = train_on(cfg, data);
  REQUIRE(out.epoch_mean_loss.size() == 6);
  CHECK(out.epoch_mean_loss.back() < out.epoch_mean_loss.front());
  MetricsReport m = evaluate_net(out.net, data);
  CHECK(m.mae >= 0.0);
  CHECK(m.mae <= 1.0);
  CHECK(m.weighted_f >= 0.0);
  CHECK(m.weighted_f <= 1.0);
}

TEST_CASE("train: thread count does not change the result") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 4;
  auto data = generate_dataset(3, 4, 64, 64, 0.5);
  setenv("DPSNET_THREADS", "1", 1);
  TrainOutput a = train_on(cfg, data);
  setenv("DPSNET_THREADS", "4", 1);
  TrainOutput b = train_on(cfg, data);
  unsetenv("DPSNET_THREADS");
  std::vector<Tensor*> pa, pb;
  a.net.params([&](const std::string&, Tensor& t) { pa.push_back(&t); });
  b.net.params([&](const std::string&, Tensor& t) { pb.push_back(&t); });
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(std::memcmp(pa[i]->values().data(), pb[i]->values().data(),
                      pa[i]->values().size() * sizeof(real)) == 0);
}
