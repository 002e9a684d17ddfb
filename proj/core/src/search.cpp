#include "marginal/search.hpp"

#include <algorithm>
#include <cmath>

namespace marginal {

namespace {

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// (p_true, p_rival) from one probability row.
std::pair<double, double> true_rival(const torch::Tensor& probs_row, int64_t k) {
  auto row = probs_row.to(torch::kDouble).contiguous();
  const double* p = row.data_ptr<double>();
  double rival = -std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < row.numel(); ++i) {
    if (i != k && p[i] > rival) rival = p[i];
  }
  return {p[k], rival};
}

std::pair<double, double> eval_point(const ClassifierHandle& model,
                                     const Sample& sample,
                                     const GradientDirection& dir, double eps) {
  auto x_adv = perturb(sample.x, dir, eps, /*clamp_domain=*/true);
  auto probs = model.predict_probs(x_adv.unsqueeze(0));
  return true_rival(probs[0], sample.y);
}

}  // namespace

RewardConfig::RewardConfig(HitBand b, double p) : band(b), p_value(p) {
  if (p_value <= 0.0) throw ContractError("RewardConfig: P must be positive");
  const double bound = p_lower_bound(band);
  if (p_value < bound - 1e-12) {
    throw ContractError("RewardConfig: P below calibration lower bound");
  }
}

RewardConfig RewardConfig::practical(HitBand b, int step_max) {
  return RewardConfig(b, p_min(step_max));
}

double reward(double l_rd, const RewardConfig& rc) {
  if (is_hit(l_rd, rc.band)) return rc.p_value;
  return -sigmoid(std::abs(l_rd));
}

double p_lower_bound(const HitBand& band) {
  if (band.lower < -1.0 || band.lower > 0.0 || band.upper < 0.0 || band.upper > 1.0) {
    throw ContractError("p_lower_bound: band must satisfy -1 <= lower <= 0 <= upper <= 1");
  }
  // integral of sigma over [a, 1] = softplus(1) - softplus(a)
  const double sp1 = softplus(1.0);
  return (sp1 - softplus(std::abs(band.lower))) + (sp1 - softplus(band.upper));
}

double p_min(int step_max) {
  if (step_max < 1) throw ContractError("p_min: step_max must be >= 1");
  return static_cast<double>(step_max) * sigmoid(1.0);
}

std::vector<double> ActionPolicy::propose_batch(const std::vector<SearchState>& states,
                                                bool deterministic) {
  std::vector<double> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(propose(s, deterministic));
  return out;
}

MarginSearchResult fixed_step_search(const ClassifierHandle& model,
                                     const Sample& sample,
                                     const GradientDirection& dir,
                                     const SearchConfig& config,
                                     CleanProbs clean) {
  int64_t evals = 0;
  double l_clean;
  if (clean) {
    l_clean = clean->first - clean->second;
  } else {
    auto [pt, pr] = eval_point(model, sample, dir, 0.0);
    ++evals;
    l_clean = pt - pr;
  }
  double best_l = l_clean, best_eps = 0.0;
  double eps = 0.0;
  bool correct = true;
  int t = 0;
  while (t < config.step_max) {
    ++t;
    eps = std::max(eps + (correct ? config.epsilon_step : -config.epsilon_step), 0.0);
    auto [pt, pr] = eval_point(model, sample, dir, eps);
    ++evals;
    const double l = pt - pr;
    correct = l >= 0.0;
    if (l >= 0.0 && l < best_l) {
      best_l = l;
      best_eps = eps;
    }
    if (is_hit(l, config.band)) {
      best_l = l;
      best_eps = eps;
      break;
    }
  }
  return {best_eps, best_l, is_hit(best_l, config.band), evals, t};
}

MarginSearchResult binary_search(const ClassifierHandle& model,
                                 const Sample& sample,
                                 const GradientDirection& dir,
                                 const SearchConfig& config,
                                 CleanProbs clean) {
  int64_t evals = 0;
  double l_lo;
  if (clean) {
    l_lo = clean->first - clean->second;
  } else {
    auto [pt, pr] = eval_point(model, sample, dir, 0.0);
    ++evals;
    l_lo = pt - pr;
  }
  auto [pt_hi, pr_hi] = eval_point(model, sample, dir, config.epsilon_hi);
  ++evals;
  const double l_hi = pt_hi - pr_hi;
  if (l_hi >= 0.0) {
    // no crossing inside the bracket; report the bracket endpoint
    return {config.epsilon_hi, l_hi, is_hit(l_hi, config.band), evals, 0};
  }
  double lo = 0.0, hi = config.epsilon_hi;
  int t = 0;
  while (t < config.step_max) {
    ++t;
    const double mid = 0.5 * (lo + hi);
    auto [pt, pr] = eval_point(model, sample, dir, mid);
    ++evals;
    const double l = pt - pr;
    if (l >= 0.0) {
      lo = mid;
      l_lo = l;
      if (is_hit(l, config.band)) break;
    } else {
      hi = mid;
    }
  }
  return {lo, l_lo, is_hit(l_lo, config.band), evals, t};
}

SearchState state_from_probs(double p_true, double p_rival, double eps_total,
                             double eps_last, const SearchConfig& config) {
  return {p_true, p_rival, eps_total / config.epsilon_max,
          eps_last / config.epsilon_max};
}

SearchState build_state(const ClassifierHandle& model, const Sample& sample,
                        const GradientDirection& dir, double eps_total,
                        double eps_last, const SearchConfig& config) {
  auto [pt, pr] = eval_point(model, sample, dir, eps_total);
  return state_from_probs(pt, pr, eps_total, eps_last, config);
}

MarginSearchResult rl_search(const ClassifierHandle& model, const Sample& sample,
                             const GradientDirection& dir, ActionPolicy& policy,
                             const SearchConfig& config, const RewardConfig& rc,
                             TransitionSink* sink, bool deterministic,
                             CleanProbs clean) {
  int64_t evals = 0;
  SearchState state;
  if (clean) {
    state = state_from_probs(clean->first, clean->second, 0.0, 0.0, config);
  } else {
    state = build_state(model, sample, dir, 0.0, 0.0, config);
    ++evals;
  }
  const auto [a_lo, a_hi] = policy.action_bounds();
  double eps_total = 0.0;
  double l_last = state.p_true - state.p_rival;
  bool hit = false;
  int t = 0;
  while (t < config.step_max) {
    ++t;
    const double action = clampd(policy.propose(state, deterministic), a_lo, a_hi);
    eps_total = clampd(eps_total + action, 0.0, config.epsilon_max);
    auto [pt, pr] = eval_point(model, sample, dir, eps_total);
    ++evals;
    l_last = pt - pr;
    const double r = reward(l_last, rc);
    const auto next = state_from_probs(pt, pr, eps_total, action, config);
    const bool done = (r > 0.0) || (t >= config.step_max);
    if (sink) sink->record(state, action, r, next, done);
    state = next;
    if (r > 0.0) {
      hit = true;
      break;
    }
  }
  return {eps_total, l_last, hit, evals, t};
}

std::vector<MarginSearchResult> run_rl_episodes(
    const ClassifierHandle& model, const torch::Tensor& x,
    const torch::Tensor& y, const torch::Tensor& dirs,
    const std::vector<std::pair<double, double>>& clean_probs,
    ActionPolicy& policy, const SearchConfig& config, const RewardConfig& rc,
    TransitionSink* sink, bool deterministic) {
  const int64_t n = x.size(0);
  if (static_cast<int64_t>(clean_probs.size()) != n || y.size(0) != n ||
      dirs.size(0) != n) {
    throw ContractError("run_rl_episodes: batch size mismatch");
  }
  const auto [a_lo, a_hi] = policy.action_bounds();
  std::vector<MarginSearchResult> results(static_cast<size_t>(n));
  std::vector<SearchState> states(static_cast<size_t>(n));
  std::vector<double> eps_total(static_cast<size_t>(n), 0.0);
  std::vector<int64_t> active;
  active.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    states[i] = state_from_probs(clean_probs[i].first, clean_probs[i].second,
                                 0.0, 0.0, config);
    active.push_back(i);
  }
  auto y_acc = y.to(torch::kInt64).contiguous();
  const int64_t* yp = y_acc.data_ptr<int64_t>();

  int t = 0;
  while (!active.empty() && t < config.step_max) {
    ++t;
    std::vector<SearchState> cur;
    cur.reserve(active.size());
    for (auto i : active) cur.push_back(states[i]);
    auto actions = policy.propose_batch(cur, deterministic);

    auto idx = torch::tensor(active, torch::kInt64);
    auto eps_vec = torch::empty({static_cast<int64_t>(active.size())}, torch::kDouble);
    {
      auto ea = eps_vec.accessor<double, 1>();
      for (size_t j = 0; j < active.size(); ++j) {
        const double a = clampd(actions[j], a_lo, a_hi);
        actions[j] = a;
        const auto i = active[j];
        eps_total[i] = clampd(eps_total[i] + a, 0.0, config.epsilon_max);
        ea[static_cast<int64_t>(j)] = eps_total[i];
      }
    }
    auto xs = x.index_select(0, idx);
    auto ds = dirs.index_select(0, idx).to(xs.dtype());
    std::vector<int64_t> bshape(static_cast<size_t>(xs.dim()), 1);
    bshape[0] = static_cast<int64_t>(active.size());
    auto x_adv = (xs + eps_vec.view(bshape).to(xs.dtype()) * ds).clamp_(0.0, 1.0);
    auto probs = model.predict_probs(x_adv);

    std::vector<int64_t> still;
    still.reserve(active.size());
    for (size_t j = 0; j < active.size(); ++j) {
      const auto i = active[j];
      auto [pt, pr] = true_rival(probs[static_cast<int64_t>(j)], yp[i]);
      const double l = pt - pr;
      const double r = reward(l, rc);
      const auto next = state_from_probs(pt, pr, eps_total[i], actions[j], config);
      const bool done = (r > 0.0) || (t >= config.step_max);
      if (sink) sink->record(states[i], actions[j], r, next, done);
      states[i] = next;
      auto& res = results[static_cast<size_t>(i)];
      res.forwards += 1;
      res.steps = t;
      res.epsilon_total = eps_total[i];
      res.l_rd_final = l;
      if (r > 0.0) {
        res.hit = true;
      } else if (!done) {
        still.push_back(i);
      }
    }
    active.swap(still);
  }
  return results;
}

}  // namespace marginal
