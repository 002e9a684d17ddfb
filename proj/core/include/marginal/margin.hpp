#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "marginal/common.hpp"

namespace marginal {

// A labelled input. x lives in [0,1]^dims; y is the true class index.
struct Sample {
  torch::Tensor x;  // [dims...]
  int64_t y = 0;
};

// Probability-space view of a classifier with input-gradient access and a
// monotone per-sample forward counter. Implementations must be safe to call
// concurrently for reads; the counter is atomic.
class ClassifierHandle {
 public:
  virtual ~ClassifierHandle() = default;

  // [B, dims...] -> [B, C] rows on the simplex (kDouble). Counts B forwards.
  torch::Tensor predict_probs(const torch::Tensor& x) const {
    forward_count_.fetch_add(x.size(0), std::memory_order_relaxed);
    return predict_probs_impl(x);
  }

  // Gradient of the classification loss w.r.t. x, per sample (kDouble).
  // Not booked against the forward counter: searches never call it.
  virtual torch::Tensor input_grad(const torch::Tensor& x,
                                   const torch::Tensor& y) const = 0;

  virtual int64_t num_classes() const = 0;

  int64_t forwards() const { return forward_count_.load(std::memory_order_relaxed); }

 protected:
  virtual torch::Tensor predict_probs_impl(const torch::Tensor& x) const = 0;

 private:
  mutable std::atomic<int64_t> forward_count_{0};
};

// Sign-gradient direction, fixed once at the clean input for the lifetime
// of one search. Keeping it frozen is what makes the step sequence additive.
struct GradientDirection {
  torch::Tensor dir;  // components in {-1, 0, +1}, same shape as x

  static GradientDirection at_clean_input(const ClassifierHandle& model,
                                          const Sample& sample);
};

// Relative-distance band that counts as a hit. lower <= 0 <= upper.
struct HitBand {
  double lower = 0.0;
  double upper = 0.1;
};

struct MarginSearchResult {
  double epsilon_total = 0.0;
  double l_rd_final = 0.0;
  bool hit = false;
  int64_t forwards = 0;
  int steps = 0;
};

// x + epsilon_total * dir, optionally clipped to the [0,1] pixel domain.
// With clamping off the result is exactly additive in epsilon_total.
torch::Tensor perturb(const torch::Tensor& x, const GradientDirection& dir,
                      double epsilon_total, bool clamp_domain = true);

// probs[k] - max_{i != k} probs[i] at x_adv. Exactly one forward pass.
double relative_distance(const ClassifierHandle& model,
                         const torch::Tensor& x_adv, int64_t k);

// Batched variant: one row per sample in x_adv, counts B forwards.
std::vector<double> relative_distance_batch(const ClassifierHandle& model,
                                            const torch::Tensor& x_adv,
                                            const torch::Tensor& ks);

// Brute-force reference for the absolute boundary distance: smallest grid
// point epsilon where the predicted class flips along dir. Empty when no
// crossing exists within [0, epsilon_scan_max].
std::optional<double> absolute_distance_oracle(const ClassifierHandle& model,
                                               const Sample& sample,
                                               const GradientDirection& dir,
                                               double grid_step,
                                               double epsilon_scan_max,
                                               bool clamp_domain = false);

inline bool is_hit(double l_rd, const HitBand& band) {
  return band.lower <= l_rd && l_rd <= band.upper;
}

double hit_rate(int64_t n_success, int64_t n_total);

// Lowest-index argmax; ties resolved toward the smaller class index.
int64_t argmax_lowest(const torch::Tensor& row);

}  // namespace marginal
