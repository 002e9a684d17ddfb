#include "marginal/margin.hpp"

namespace marginal {

GradientDirection GradientDirection::at_clean_input(const ClassifierHandle& model,
                                                    const Sample& sample) {
  auto g = model.input_grad(sample.x.unsqueeze(0),
                            torch::tensor({sample.y}, torch::kInt64));
  return GradientDirection{g.squeeze(0).sign()};
}

torch::Tensor perturb(const torch::Tensor& x, const GradientDirection& dir,
                      double epsilon_total, bool clamp_domain) {
  if (epsilon_total < 0.0) {
    throw ContractError("perturb: epsilon_total must be nonnegative");
  }
  if (!dir.dir.defined() || dir.dir.sizes() != x.sizes()) {
    throw ContractError("perturb: direction shape does not match input");
  }
  auto out = x + epsilon_total * dir.dir.to(x.dtype());
  if (clamp_domain) out.clamp_(0.0, 1.0);
  return out;
}

int64_t argmax_lowest(const torch::Tensor& row) {
  auto acc = row.to(torch::kDouble).contiguous();
  const double* p = acc.data_ptr<double>();
  int64_t best = 0;
  for (int64_t i = 1; i < acc.numel(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

namespace {

double rd_from_probs(const torch::Tensor& probs_row, int64_t k) {
  auto row = probs_row.to(torch::kDouble).contiguous();
  const double* p = row.data_ptr<double>();
  const int64_t c = row.numel();
  double rival = -std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < c; ++i) {
    if (i != k && p[i] > rival) rival = p[i];
  }
  return p[k] - rival;
}

}  // namespace

double relative_distance(const ClassifierHandle& model,
                         const torch::Tensor& x_adv, int64_t k) {
  if (model.num_classes() < 2) {
    throw ContractError("relative_distance: needs at least two classes");
  }
  auto probs = model.predict_probs(x_adv.unsqueeze(0));
  return rd_from_probs(probs[0], k);
}

std::vector<double> relative_distance_batch(const ClassifierHandle& model,
                                            const torch::Tensor& x_adv,
                                            const torch::Tensor& ks) {
  if (model.num_classes() < 2) {
    throw ContractError("relative_distance_batch: needs at least two classes");
  }
  auto probs = model.predict_probs(x_adv);
  std::vector<double> out(static_cast<size_t>(probs.size(0)));
  auto k_acc = ks.to(torch::kInt64).contiguous();
  const int64_t* kp = k_acc.data_ptr<int64_t>();
  for (int64_t i = 0; i < probs.size(0); ++i) {
    out[static_cast<size_t>(i)] = rd_from_probs(probs[i], kp[i]);
  }
  return out;
}

std::optional<double> absolute_distance_oracle(const ClassifierHandle& model,
                                               const Sample& sample,
                                               const GradientDirection& dir,
                                               double grid_step,
                                               double epsilon_scan_max,
                                               bool clamp_domain) {
  if (grid_step <= 0.0) {
    throw ContractError("absolute_distance_oracle: grid_step must be positive");
  }
  const int64_t n_points =
      static_cast<int64_t>(std::floor(epsilon_scan_max / grid_step)) + 1;
  for (int64_t i = 0; i < n_points; ++i) {
    const double eps = static_cast<double>(i) * grid_step;
    auto x_adv = perturb(sample.x, dir, eps, clamp_domain);
    auto probs = model.predict_probs(x_adv.unsqueeze(0));
    if (argmax_lowest(probs[0]) != sample.y) return eps;
  }
  return std::nullopt;
}

double hit_rate(int64_t n_success, int64_t n_total) {
  if (n_total <= 0) throw ContractError("hit_rate: n_total must be positive");
  if (n_success > n_total || n_success < 0) {
    throw ContractError("hit_rate: n_success out of range");
  }
  return static_cast<double>(n_success) / static_cast<double>(n_total);
}

}  // namespace marginal
