#pragma once

#include "dsain/params.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

struct GradCheckOptions {
  double step = 1e-5;
  std::int64_t max_coords = 200;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  std::int64_t coords_checked = 0;
};

/// Compares analytic gradients already accumulated on `params` against
/// central finite differences of `loss_value`. Relative error per coordinate
/// is |analytic - fd| / max(1, |fd|).
inline GradCheckResult fd_compare(ModelParams& params, const std::function<double()>& loss_value,
                                  const GradCheckOptions& opt) {
  require(opt.step >= 1e-6 && opt.step <= 1e-3, "fd_compare: step outside [1e-6, 1e-3]");
  std::int64_t total = params.total_elements();
  require(total > 0, "fd_compare: no parameters");

  std::vector<std::int64_t> coords;
  if (opt.max_coords <= 0 || total <= opt.max_coords) {
    coords.resize(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    Rng rng(opt.seed);
    std::vector<std::uint8_t> taken(static_cast<std::size_t>(total), 0);
    while (static_cast<std::int64_t>(coords.size()) < opt.max_coords) {
      std::int64_t c = rng.uniform_int(0, total - 1);
      if (taken[static_cast<std::size_t>(c)]) continue;
      taken[static_cast<std::size_t>(c)] = 1;
      coords.push_back(c);
    }
  }

  GradCheckResult result;
  for (std::int64_t coord : coords) {
    // locate the owning tensor
    std::int64_t off = coord;
    Tensor* tensor = nullptr;
    const std::string* name = nullptr;
    for (auto& [pname, t] : params.entries()) {
      if (off < t.size()) {
        tensor = &t;
        name = &pname;
        break;
      }
      off -= t.size();
    }
    require(tensor != nullptr, "fd_compare: coordinate out of range");

    double& slot = tensor->data()[static_cast<std::size_t>(off)];
    double saved = slot;
    slot = saved + opt.step;
    double fp = loss_value();
    slot = saved - opt.step;
    double fm = loss_value();
    slot = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("fd_compare: non-finite loss while perturbing " + *name + "[" +
                               std::to_string(off) + "]");
    double fd = (fp - fm) / (2.0 * opt.step);
    double analytic =
        tensor->has_grad() ? tensor->grad()[static_cast<std::size_t>(off)] : 0.0;
    double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
    if (rel > result.max_rel_err) {
      result.max_rel_err = rel;
      result.worst_param = *name;
      result.worst_index = off;
    }
    ++result.coords_checked;
  }
  return result;
}

/// Full gradient check: runs one recorded forward+backward of `build_loss`
/// to populate analytic gradients, then sweeps sampled coordinates with
/// central differences (forward-only re-evaluations).
inline GradCheckResult grad_check(ModelParams& params,
                                  const std::function<Tensor(Tape&)>& build_loss,
                                  const GradCheckOptions& opt = {}) {
  params.zero_grad();
  Tape tape;
  Tensor loss = build_loss(tape);
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("grad_check: non-finite loss at the evaluation point");
  tape.backward(loss);
  auto loss_value = [&build_loss]() {
    Tape eval_tape(false);
    return build_loss(eval_tape).item();
  };
  return fd_compare(params, loss_value, opt);
}

}  // namespace dsain
