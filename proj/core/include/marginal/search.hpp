#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "marginal/margin.hpp"

namespace marginal {

struct SearchConfig {
  int step_max = 10;
  double epsilon_max = 1.0;
  HitBand band{0.0, 0.1};
  double epsilon_step = 0.03;  // fixed-step searcher only
  double epsilon_hi = 1.0;     // binary searcher's initial upper bracket
};

// The 4-component RL observation: true/rival class probabilities at the
// current perturbation, plus total and last step sizes in epsilon_max units.
struct SearchState {
  double p_true = 0.0;
  double p_rival = 0.0;
  double eps_total_norm = 0.0;
  double eps_last_norm = 0.0;
};

// Positive reward P granted on a band hit. Construction rejects values
// below the calibration lower bound, which would allow hit episodes with
// negative total reward.
struct RewardConfig {
  HitBand band{0.0, 0.1};
  double p_value = 0.0;

  RewardConfig(HitBand b, double p);
  // The practical choice: P = step_max * sigma(1), so even a hit preceded
  // by step_max - 1 maximal penalties stays positive in total.
  static RewardConfig practical(HitBand b, int step_max);
};

// +P inside the band, -sigma(|l_rd|) outside.
double reward(double l_rd, const RewardConfig& rc);

// Integral lower bound for P over the reachable relative distances.
double p_lower_bound(const HitBand& band);

// P used in actual training: step_max * sigma(1).
double p_min(int step_max);

// Step proposal source for the RL searcher. Implementations must return
// actions inside action_bounds(); the episode loop clips regardless.
class ActionPolicy {
 public:
  virtual ~ActionPolicy() = default;
  virtual double propose(const SearchState& state, bool deterministic) = 0;
  virtual std::vector<double> propose_batch(const std::vector<SearchState>& states,
                                            bool deterministic);
  virtual std::pair<double, double> action_bounds() const = 0;
};

// Receiver for recorded episode transitions (the off-policy replay buffer).
class TransitionSink {
 public:
  virtual ~TransitionSink() = default;
  virtual void record(const SearchState& state, double action, double reward,
                      const SearchState& next, bool done) = 0;
};

// Clean-point probabilities (true, rival) from the screening pass; passing
// them lets searchers skip re-evaluating epsilon = 0.
using CleanProbs = std::optional<std::pair<double, double>>;

// Section-3 rule: step outward while still correctly classified, back off
// once the boundary is crossed; keeps the best (lowest nonnegative L_rd)
// point seen and exits early on a band hit.
MarginSearchResult fixed_step_search(const ClassifierHandle& model,
                                     const Sample& sample,
                                     const GradientDirection& dir,
                                     const SearchConfig& config,
                                     CleanProbs clean = {});

// Bisect [0, epsilon_hi], maintaining correct-low/incorrect-high, early
// exit on a band hit; when the label never flips at epsilon_hi the bracket
// endpoint itself is returned with its band status.
MarginSearchResult binary_search(const ClassifierHandle& model,
                                 const Sample& sample,
                                 const GradientDirection& dir,
                                 const SearchConfig& config,
                                 CleanProbs clean = {});

// Assembles the observation at perturb(x, dir, eps_total); one forward.
SearchState build_state(const ClassifierHandle& model, const Sample& sample,
                        const GradientDirection& dir, double eps_total,
                        double eps_last, const SearchConfig& config);

SearchState state_from_probs(double p_true, double p_rival, double eps_total,
                             double eps_last, const SearchConfig& config);

// One RL-controlled episode. Transitions go to sink when provided;
// epsilon_total is kept inside [0, epsilon_max] at every step.
MarginSearchResult rl_search(const ClassifierHandle& model, const Sample& sample,
                             const GradientDirection& dir, ActionPolicy& policy,
                             const SearchConfig& config, const RewardConfig& rc,
                             TransitionSink* sink = nullptr,
                             bool deterministic = false, CleanProbs clean = {});

// Lockstep batched episodes: one policy call and one model forward per step
// across all still-active episodes. Math identical to rl_search per sample.
std::vector<MarginSearchResult> run_rl_episodes(
    const ClassifierHandle& model, const torch::Tensor& x,
    const torch::Tensor& y, const torch::Tensor& dirs,
    const std::vector<std::pair<double, double>>& clean_probs,
    ActionPolicy& policy, const SearchConfig& config, const RewardConfig& rc,
    TransitionSink* sink = nullptr, bool deterministic = false);

}  // namespace marginal
