#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dps/ops.hpp"
#include "dps/tensor.hpp"

namespace dps {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  std::int64_t checked = 0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

namespace detail {

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  return d / std::max({std::abs(a), std::abs(b), 1.0});
}

}  // namespace detail

/// Central finite differences against the tape gradients.
///
/// `make_loss` must rebuild the scalar objective from the given tensors on
/// every call; it sees watched tensors once (for the analytic pass) and plain
/// constants afterwards (for the numeric evaluations). Tensors with more than
/// `full_limit` elements are probed at `samples` deterministically chosen
/// coordinates rather than exhaustively.
template <typename MakeLoss>
GradCheckResult check_gradients(const std::string& name, std::vector<Tensor> vars,
                                MakeLoss&& make_loss, double h = 1e-5, std::int64_t full_limit = 512,
                                std::int64_t samples = 32, std::uint64_t coord_seed = 7) {
  GradCheckResult res;
  res.name = name;

  std::vector<std::vector<real>> analytic(vars.size());
  {
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(vars.size());
    for (auto& v : vars) {
      Tensor leaf = v.shared_value_leaf();
      tape.watch(leaf);
      watched.push_back(leaf);
    }
    Tensor loss = make_loss(watched);
    tape.backward(loss);
    for (std::size_t k = 0; k < vars.size(); ++k) analytic[k] = watched[k].grad();
  }

  auto eval = [&]() -> double {
    Tensor loss = make_loss(vars);
    return static_cast<double>(loss.item());
  };

  CounterRng pick(coord_seed);
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto& buf = vars[k].values();
    const std::int64_t n = static_cast<std::int64_t>(buf.size());
    std::vector<std::int64_t> coords;
    if (n <= full_limit) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < samples; ++i)
        coords.push_back(static_cast<std::int64_t>(pick.next_below(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t i : coords) {
      const real saved = buf[static_cast<std::size_t>(i)];
      buf[static_cast<std::size_t>(i)] = saved + static_cast<real>(h);
      const double fp = eval();
      buf[static_cast<std::size_t>(i)] = saved - static_cast<real>(h);
      const double fm = eval();
      buf[static_cast<std::size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double err = detail::rel_err(static_cast<double>(analytic[k][static_cast<std::size_t>(i)]), numeric);
      res.max_rel_err = std::max(res.max_rel_err, err);
      ++res.checked;
    }
  }
  return res;
}

/// Like check_gradients, but probes `count` coordinates drawn across the
/// whole variable set instead of per tensor (for whole-network checks).
template <typename MakeLoss>
GradCheckResult check_gradients_global(const std::string& name, std::vector<Tensor> vars,
                                       MakeLoss&& make_loss, std::int64_t count, double h = 1e-5,
                                       std::uint64_t coord_seed = 7) {
  GradCheckResult res;
  res.name = name;
  std::vector<std::vector<real>> analytic(vars.size());
  {
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(vars.size());
    for (auto& v : vars) {
      Tensor leaf = v.shared_value_leaf();
      tape.watch(leaf);
      watched.push_back(leaf);
    }
    Tensor loss = make_loss(watched);
    tape.backward(loss);
    for (std::size_t k = 0; k < vars.size(); ++k) analytic[k] = watched[k].grad();
  }
  auto eval = [&]() -> double { return static_cast<double>(make_loss(vars).item()); };
  std::int64_t total = 0;
  for (const auto& v : vars) total += v.numel();
  CounterRng pick(coord_seed);
  for (std::int64_t probe = 0; probe < count; ++probe) {
    std::int64_t flat = static_cast<std::int64_t>(pick.next_below(static_cast<std::uint64_t>(total)));
    std::size_t k = 0;
    while (flat >= vars[k].numel()) {
      flat -= vars[k].numel();
      ++k;
    }
    auto& buf = vars[k].values();
    const real saved = buf[static_cast<std::size_t>(flat)];
    buf[static_cast<std::size_t>(flat)] = saved + static_cast<real>(h);
    const double fp = eval();
    buf[static_cast<std::size_t>(flat)] = saved - static_cast<real>(h);
    const double fm = eval();
    buf[static_cast<std::size_t>(flat)] = saved;
    const double numeric = (fp - fm) / (2 * h);
    res.max_rel_err = std::max(
        res.max_rel_err, detail::rel_err(static_cast<double>(analytic[k][static_cast<std::size_t>(flat)]), numeric));
    ++res.checked;
  }
  return res;
}

}  // namespace dps
