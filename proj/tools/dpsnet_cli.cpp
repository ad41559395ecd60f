#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "dps/checkpoint.hpp"
#include "dps/gradsuite.hpp"
#include "dps/image_io.hpp"
#include "dps/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitGradcheck = 4;

bool parse_size(const std::string& s, int& h, int& w) {
  const std::size_t x = s.find('x');
  if (x == std::string::npos) return false;
  try {
    h = std::stoi(s.substr(0, x));
    w = std::stoi(s.substr(x + 1));
  } catch (...) {
    return false;
  }
  return h > 0 && w > 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, int synthetic,
              const std::string& out_dir) {
  dps::TrainConfig cfg = dps::load_config(config_path);
  std::vector<dps::Sample> data;
  if (synthetic > 0) {
    data = dps::generate_dataset(cfg.seed, synthetic, cfg.net.input_h, cfg.net.input_w,
                                 cfg.synth_difficulty);
  } else {
    data = dps::read_dataset(data_dir);
  }
  dps::TrainHooks hooks;
  hooks.on_step = [](const dps::StepLog& s) {
    std::printf("%d,%lld,%.8g,%.6f,%.6f,%.6f,%.6f\n", s.epoch, static_cast<long long>(s.step),
                s.lr, s.wbce, s.wiou, s.bbce, s.total);
    std::fflush(stdout);
  };
  dps::TrainOutput out = dps::train_on(cfg, data, hooks, out_dir);
  if (!out.epoch_mean_loss.empty())
    std::printf("# trained %lld steps, final epoch mean loss %.6f\n",
                static_cast<long long>(out.steps.size()), out.epoch_mean_loss.back());
  std::printf("# checkpoint: %s\n",
              (std::filesystem::path(out_dir) / "final.ckpt").string().c_str());
  return kExitOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                 const std::string& csv_path) {
  dps::LoadedCheckpoint lc = dps::load_checkpoint(ckpt_path);
  std::vector<dps::Sample> data = dps::read_dataset(data_dir);
  std::vector<dps::MetricsReport> per_image;
  const dps::MetricsReport mean = dps::evaluate_net(
      lc.net, data, dps::emeasure_threshold_from_string(lc.cfg.emeasure_threshold), &per_image);
  std::ofstream csv(csv_path);
  if (!csv) throw dps::IoError(csv_path + ": cannot open for writing");
  csv << "image,mae,s_measure,e_measure,weighted_f\n";
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    const auto& r = per_image[i];
    csv << dps::sample_name(static_cast<int>(i)) << "," << r.mae << "," << r.s_measure << ","
        << r.e_measure << "," << r.weighted_f << "\n";
  }
  csv << "mean," << mean.mae << "," << mean.s_measure << "," << mean.e_measure << ","
      << mean.weighted_f << "\n";
  std::printf("images: %zu\nmean mae: %.6f\nmean s-measure: %.6f\nmean e-measure: %.6f\n"
              "mean weighted-f: %.6f\n",
              per_image.size(), mean.mae, mean.s_measure, mean.e_measure, mean.weighted_f);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  auto results = dps::run_gradient_suite(5, true, seed);
  const double tol = 1e-4, full_net_tol = 1e-3;
  int failures = 0;
  double worst = 0;
  std::string worst_name;
  for (const auto& r : results) {
    const double t = r.name.rfind("block:full_net", 0) == 0 ? full_net_tol : tol;
    if (!r.pass(t)) {
      ++failures;
      std::printf("FAIL %-44s rel err %.3e (tol %.0e, %lld coords)\n", r.name.c_str(),
                  r.max_rel_err, t, static_cast<long long>(r.checked));
    }
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
  }
  std::printf("gradcheck: %zu checks, %d failures, worst %.3e (%s)\n", results.size(), failures,
              worst, worst_name.c_str());
  return failures == 0 ? kExitOk : kExitGradcheck;
}

int cmd_synth(std::uint64_t seed, int count, const std::string& size, double difficulty,
              const std::string& out_dir) {
  int h = 0, w = 0;
  if (!parse_size(size, h, w))
    throw dps::ConfigError("synth: --size expects HxW (e.g. 96x96), got '" + size + "'");
  auto data = dps::generate_dataset(seed, count, h, w, difficulty);
  dps::write_dataset(out_dir, data);
  std::printf("wrote %d samples to %s\n", count, out_dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DPS-Net: deformable point sampling for camouflaged object detection"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train on synthetic or on-disk data");
  std::string train_config, train_data, train_out;
  int train_synth = 0;
  train->add_option("--config", train_config, "key = value config file")->required();
  auto* opt_data = train->add_option("--data", train_data, "dataset directory");
  auto* opt_synth = train->add_option("--synthetic", train_synth, "generate N synthetic samples");
  opt_data->excludes(opt_synth);
  train->add_option("--out", train_out, "output directory for checkpoints and logs")->required();

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_csv;
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  evaluate->add_option("--data", eval_data, "dataset directory")->required();
  evaluate->add_option("--csv", eval_csv, "per-image metrics CSV output")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--seed", gc_seed, "seed base for the random checks");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset to disk");
  std::uint64_t sy_seed = 1;
  int sy_count = 16;
  std::string sy_size = "96x96", sy_out;
  double sy_difficulty = 0.6;
  synth->add_option("--seed", sy_seed, "base seed");
  synth->add_option("--count", sy_count, "number of samples")->required();
  synth->add_option("--size", sy_size, "sample size HxW (multiples of 32)");
  synth->add_option("--difficulty", sy_difficulty, "camouflage difficulty in [0,1]");
  synth->add_option("--out", sy_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (train->parsed()) {
      if (train_synth <= 0 && train_data.empty())
        throw dps::ConfigError("train: either --data <dir> or --synthetic N is required");
      return cmd_train(train_config, train_data, train_synth, train_out);
    }
    if (evaluate->parsed()) return cmd_evaluate(eval_ckpt, eval_data, eval_csv);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed);
    if (synth->parsed()) return cmd_synth(sy_seed, sy_count, sy_size, sy_difficulty, sy_out);
    return kExitConfig;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  } catch (const dps::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const dps::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
}
