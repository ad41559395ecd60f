#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include "dps/checkpoint.hpp"
#include "dps/config.hpp"
#include "dps/loss.hpp"
#include "dps/metrics.hpp"
#include "dps/model.hpp"
#include "dps/optim.hpp"
#include "dps/synth.hpp"

namespace dps {

inline int worker_count(int wanted) {
  int cap = 0;
  if (const char* env = std::getenv("DPSNET_THREADS")) {
    cap = std::atoi(env);
    if (cap < 1) cap = 1;
  }
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  int n = std::min(wanted, hw);
  if (cap > 0) n = std::min(n, cap);
  return std::max(n, 1);
}

struct StepLog {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0, wbce = 0, wiou = 0, bbce = 0, total = 0;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  /// Called after every epoch with its mean total loss; return true to stop.
  std::function<bool(int epoch, double epoch_mean_total, DpsNet& net)> after_epoch;
};

struct TrainOutput {
  DpsNet net;
  Adam adam;
  std::vector<double> epoch_mean_loss;
  std::vector<StepLog> steps;
};

namespace train_detail {

/// Loss and gradients for one sample on its own tape. The shadow net shares
/// the master's parameter values but owns its gradients, so several samples
/// can run on parallel threads against the same master.
inline LossReport sample_pass(const DpsNet& master, const Sample& s, int dilation_radius,
                              std::vector<std::vector<real>>& grads_out) {
  DenormalFlushGuard ftz;
  Tape tape;
  DpsNet shadow = shadow_for_tape(master, tape);
  DpsNet::Output out = shadow(s.image);
  TotalLoss loss = total_loss(out.mask, s.mask, out.boundary, s.boundary, dilation_radius);
  tape.backward(loss.value);
  grads_out.clear();
  shadow.params([&grads_out](const std::string&, Tensor& t) { grads_out.push_back(t.grad()); });
  return loss.report;
}

}  // namespace train_detail

/// Training loop: per-epoch deterministic shuffling, random horizontal flips,
/// batch members processed on parallel workers, gradients averaged in sample
/// order (so results are independent of the worker count), Adam with cosine
/// annealing. Checkpoints go to <out_dir>/last.ckpt each epoch and
/// <out_dir>/final.ckpt at the end; the step log is appended to
/// <out_dir>/train_log.csv.
inline TrainOutput train_on(const TrainConfig& cfg, const std::vector<Sample>& data,
                            const TrainHooks& hooks = {}, const std::string& out_dir = "") {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  for (const Sample& s : data)
    if (s.image.size(1) != cfg.net.input_h || s.image.size(2) != cfg.net.input_w)
      throw ConfigError("train: sample size " + shape_str(s.image.shape()) +
                        " does not match configured input " + std::to_string(cfg.net.input_h) +
                        "x" + std::to_string(cfg.net.input_w));

  CounterRng base(cfg.seed);
  CounterRng init_rng = base.fork(1);
  CounterRng shuffle_rng = base.fork(2);
  CounterRng flip_rng = base.fork(3);

  TrainOutput out;
  out.net = DpsNet(cfg.net, init_rng);
  out.adam.beta1 = cfg.adam_beta1;
  out.adam.beta2 = cfg.adam_beta2;
  out.adam.eps = cfg.adam_eps;

  std::vector<Tensor*> master_params;
  std::vector<std::int64_t> sizes;
  out.net.params([&](const std::string&, Tensor& t) {
    master_params.push_back(&t);
    sizes.push_back(t.numel());
  });
  out.adam.init(sizes);

  const std::int64_t n = static_cast<std::int64_t>(data.size());
  const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(std::filesystem::path(out_dir) / "train_log.csv");
    log << "epoch,step,lr,wbce,wiou,bbce,total\n";
  }

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the dedicated stream
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j =
          static_cast<std::int64_t>(shuffle_rng.next_below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    double epoch_total = 0;
    std::int64_t epoch_steps = 0;
    for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n - b0);
      std::vector<Sample> batch(static_cast<std::size_t>(bsz));
      for (std::int64_t i = 0; i < bsz; ++i) {
        const Sample& src = data[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + i)])];
        batch[static_cast<std::size_t>(i)] = flip_rng.next_double() < 0.5 ? hflip(src) : src;
      }

      std::vector<std::vector<std::vector<real>>> grads(static_cast<std::size_t>(bsz));
      std::vector<LossReport> reports(static_cast<std::size_t>(bsz));
      const int workers = worker_count(static_cast<int>(bsz));
      if (workers <= 1) {
        for (std::int64_t i = 0; i < bsz; ++i)
          reports[static_cast<std::size_t>(i)] = train_detail::sample_pass(
              out.net, batch[static_cast<std::size_t>(i)], cfg.boundary_dilation_radius,
              grads[static_cast<std::size_t>(i)]);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
          pool.emplace_back([&, w] {
            for (std::int64_t i = w; i < bsz; i += workers)
              reports[static_cast<std::size_t>(i)] = train_detail::sample_pass(
                  out.net, batch[static_cast<std::size_t>(i)], cfg.boundary_dilation_radius,
                  grads[static_cast<std::size_t>(i)]);
          });
        for (auto& t : pool) t.join();
      }

      // average gradients in sample order: bit-stable for any worker count
      DenormalFlushGuard ftz;
      std::vector<std::vector<real>> total(master_params.size());
      for (std::size_t k = 0; k < master_params.size(); ++k)
        total[k].assign(static_cast<std::size_t>(master_params[k]->numel()), 0);
      for (std::int64_t i = 0; i < bsz; ++i)
        for (std::size_t k = 0; k < master_params.size(); ++k) {
          const auto& g = grads[static_cast<std::size_t>(i)][k];
          for (std::size_t j = 0; j < g.size(); ++j) total[k][j] += g[j];
        }
      const real inv = static_cast<real>(1.0 / static_cast<double>(bsz));
      for (auto& g : total)
        for (auto& v : g) v *= inv;

      const double lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
      out.adam.step(master_params, total, lr);

      StepLog sl;
      sl.epoch = epoch;
      sl.step = step;
      sl.lr = lr;
      for (std::int64_t i = 0; i < bsz; ++i) {
        const auto& r = reports[static_cast<std::size_t>(i)];
        sl.wbce += r.mask_wbce;
        sl.wiou += r.mask_wiou;
        sl.bbce += r.boundary_bce;
        sl.total += r.total;
      }
      sl.wbce /= static_cast<double>(bsz);
      sl.wiou /= static_cast<double>(bsz);
      sl.bbce /= static_cast<double>(bsz);
      sl.total /= static_cast<double>(bsz);
      if (log.is_open())
        log << sl.epoch << "," << sl.step << "," << sl.lr << "," << sl.wbce << "," << sl.wiou
            << "," << sl.bbce << "," << sl.total << "\n";
      if (hooks.on_step) hooks.on_step(sl);
      out.steps.push_back(sl);
      epoch_total += sl.total;
      ++epoch_steps;
      ++step;
    }
    const double epoch_mean = epoch_total / static_cast<double>(epoch_steps);
    out.epoch_mean_loss.push_back(epoch_mean);
    if (!out_dir.empty())
      save_checkpoint((std::filesystem::path(out_dir) / "last.ckpt").string(), cfg, out.net,
                      out.adam);
    if (hooks.after_epoch && hooks.after_epoch(epoch, epoch_mean, out.net)) break;
  }
  if (!out_dir.empty())
    save_checkpoint((std::filesystem::path(out_dir) / "final.ckpt").string(), cfg, out.net,
                    out.adam);
  return out;
}

/// Mask metrics of the net on a dataset; images are processed on parallel
/// read-only workers. Per-image reports land in `per_image` when given.
inline MetricsReport evaluate_net(const DpsNet& net, const std::vector<Sample>& data,
                                  EmeasureThreshold mode = EmeasureThreshold::Adaptive,
                                  std::vector<MetricsReport>* per_image = nullptr) {
  if (data.empty()) throw ConfigError("evaluate: dataset is empty");
  std::vector<MetricsReport> reports(data.size());
  const int workers = worker_count(static_cast<int>(data.size()));
  auto eval_one = [&](std::size_t i) {
    DenormalFlushGuard ftz;
    DpsNet::Output o = net(data[i].image);
    reports[i] = compute_metrics(o.mask, data[i].mask, mode);
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < data.size(); ++i) eval_one(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < data.size();
             i += static_cast<std::size_t>(workers))
          eval_one(i);
      });
    for (auto& t : pool) t.join();
  }
  MetricsReport mean;
  for (const auto& r : reports) {
    mean.mae += r.mae;
    mean.s_measure += r.s_measure;
    mean.e_measure += r.e_measure;
    mean.weighted_f += r.weighted_f;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  mean.mae *= inv;
  mean.s_measure *= inv;
  mean.e_measure *= inv;
  mean.weighted_f *= inv;
  if (per_image) *per_image = std::move(reports);
  return mean;
}

}  // namespace dps
