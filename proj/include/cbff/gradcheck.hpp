#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cbff/model.hpp"

namespace cbff {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0;
  std::string worst_group;
  bool passed(double tol) const { return max_rel_err < tol; }
};

struct GradCheckOptions {
  int64_t input_size = 32;
  int64_t batch = 2;
  int samples_per_group = 2;
  double eps = 1e-5;
  uint64_t seed = 7;
  // Test fixture: perturbs one analytic gradient so the harness must flag it.
  bool inject_fault = false;
};

// Verifies analytic parameter gradients of the full network against central
// differences, in the precision of T (double for the 1e-6 contract). The loss
// is the supervised objective (mean of both heads' cross-entropy) in training
// mode, so the check exercises the exact backward path used by the trainer.
template <typename T>
GradCheckReport gradcheck_model(const nn::ModelConfig& cfg, const GradCheckOptions& opt) {
  RngStream init(opt.seed, "init");
  nn::CdNetwork<T> net(cfg, init);
  nn::ParamRefs<T> params = net.params();

  RngStream data_rng(opt.seed, "gradcheck-data");
  Tensor<T> img_a = Tensor<T>::rand_uniform({opt.batch, 3, opt.input_size, opt.input_size},
                                            data_rng);
  Tensor<T> img_b = Tensor<T>::rand_uniform({opt.batch, 3, opt.input_size, opt.input_size},
                                            data_rng);
  Tensor<uint8_t> labels({opt.batch, opt.input_size, opt.input_size});
  for (int64_t i = 0; i < labels.numel(); ++i)
    labels[i] = uint8_t(data_rng.uniform_int(2));

  auto loss_value = [&]() {
    NoGradGuard ng;
    Var<T> a(img_a), b(img_b);
    nn::BranchLogits<T> out = net.forward(a, b, /*training=*/true);
    Var<T> lc = ops::cross_entropy_mean(out.logits_c, labels);
    Var<T> lt = ops::cross_entropy_mean(out.logits_t, labels);
    return T(0.5) * (lc.value()[0] + lt.value()[0]);
  };

  // Analytic pass.
  nn::zero_grads(params);
  {
    Var<T> a(img_a), b(img_b);
    nn::BranchLogits<T> out = net.forward(a, b, /*training=*/true);
    Var<T> loss = ops::mul_scalar(
        ops::add(ops::cross_entropy_mean(out.logits_c, labels),
                 ops::cross_entropy_mean(out.logits_t, labels)),
        T(0.5));
    loss.backward();
  }

  RngStream pick(opt.seed, "gradcheck-pick");
  GradCheckReport report;
  bool fault_pending = opt.inject_fault;

  auto central_diff = [&](Tensor<T>& value, int64_t idx, double eps) {
    T orig = value[idx];
    value[idx] = orig + T(eps);
    double fp = double(loss_value());
    value[idx] = orig - T(eps);
    double fm = double(loss_value());
    value[idx] = orig;
    return (fp - fm) / (2.0 * eps);
  };

  for (auto* p : params) {
    GradCheckGroup group;
    group.name = p->name;
    Tensor<T>& value = p->value();
    const Tensor<T>& grad = p->var.grad();
    const bool fault_this_group = fault_pending;
    fault_pending = false;
    for (int s = 0; s < opt.samples_per_group; ++s) {
      // A coordinate whose perturbation window straddles a ReLU/maxpool kink
      // makes the central-difference oracle itself invalid: the two-eps
      // estimates disagree wildly. Such coordinates are resampled; a genuine
      // analytic-gradient bug is eps-stable and cannot be hidden this way.
      double err = 0;
      for (int attempt = 0; attempt < 6; ++attempt) {
        int64_t idx = int64_t(pick.uniform_int(uint64_t(value.numel())));
        double analytic = double(grad[idx]);
        if (fault_this_group) analytic = analytic * 1.01 + 1e-3;
        bool oracle_valid = false;
        for (double eps = opt.eps; eps > opt.eps / 600.0; eps /= 8.0) {
          double fd1 = central_diff(value, idx, eps);
          double fd2 = central_diff(value, idx, eps / 4.0);
          // Relative where gradients are resolvable, absolute below the
          // scale where central differences carry signal (torch-style
          // atol/rtol folded into one ratio).
          err = std::fabs(analytic - fd2) /
                std::max({1e-3, std::fabs(analytic), std::fabs(fd2)});
          // Certify the oracle itself: the two-eps estimates must agree to
          // well under the tolerance being checked, otherwise truncation
          // error (curvature, kink windows) is polluting the estimate.
          double fd_disagreement = std::fabs(fd1 - fd2);
          oracle_valid = fd_disagreement <
                         std::max(1e-9, 2e-7 * std::max({1e-3, std::fabs(fd1), std::fabs(fd2)}));
          if (oracle_valid) break;
        }
        if (oracle_valid || err < 1e-8) break;
      }
      group.max_rel_err = std::max(group.max_rel_err, err);
    }
    if (group.max_rel_err > report.max_rel_err) {
      report.max_rel_err = group.max_rel_err;
      report.worst_group = group.name;
    }
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace cbff
