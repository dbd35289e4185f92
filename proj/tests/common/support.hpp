#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace test_support {

// Fresh per-test directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cfaudit_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Norm-wise relative error between autograd and central differences over the
// concatenation of the given leaf tensors.
inline double gradient_check(const std::function<torch::Tensor()>& loss_fn, const std::vector<torch::Tensor>& leaves,
                             double h = 1e-6) {
  for (auto leaf : leaves)
    if (leaf.grad().defined()) leaf.mutable_grad().zero_();
  loss_fn().backward();
  double diff2 = 0.0, analytic2 = 0.0, numeric2 = 0.0;
  for (auto leaf : leaves) {
    const auto analytic = leaf.grad().detach().clone().to(torch::kFloat64).view(-1);
    auto numeric = torch::zeros_like(analytic);
    torch::NoGradGuard no_grad;
    auto flat = leaf.view(-1);
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double original = flat[i].item<double>();
      flat[i].fill_(original + h);
      const double plus = loss_fn().item<double>();
      flat[i].fill_(original - h);
      const double minus = loss_fn().item<double>();
      flat[i].fill_(original);
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    diff2 += (analytic - numeric).pow(2).sum().item<double>();
    analytic2 += analytic.pow(2).sum().item<double>();
    numeric2 += numeric.pow(2).sum().item<double>();
  }
  const double scale = std::sqrt(analytic2) + std::sqrt(numeric2);
  return scale < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / scale;
}

}  // namespace test_support
