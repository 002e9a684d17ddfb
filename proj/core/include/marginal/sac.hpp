#pragma once

#include <memory>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "marginal/search.hpp"

namespace marginal {

struct AgentConfig {
  int state_dim = 4;
  int batch_size = 512;
  int hidden1 = 1024;
  int hidden2 = 1024;
  double learning_rate = 3e-4;
  int64_t buffer_capacity = 1'000'000;
  double gamma = 0.99;
  double tau = 5e-3;
  double action_low = -8.0 / 255.0;
  double action_high = 16.0 / 255.0;
  int64_t warmup_transitions = 1000;
  double target_entropy = -1.0;
  double log_std_min = -20.0;
  double log_std_max = 2.0;
  uint64_t seed = 0;

  void validate() const;
};

struct Transition {
  SearchState state;
  double action = 0.0;
  double reward = 0.0;
  SearchState next_state;
  bool done = false;
};

// Ring buffer with FIFO eviction; batches are drawn uniformly without
// replacement within a batch.
class ReplayBuffer : public TransitionSink {
 public:
  explicit ReplayBuffer(int64_t capacity);

  void store(const Transition& t);
  void record(const SearchState& state, double action, double reward,
              const SearchState& next, bool done) override {
    store(Transition{state, action, reward, next, done});
  }

  int64_t size() const { return size_; }
  int64_t capacity() const { return capacity_; }
  Transition at(int64_t logical) const;  // 0 = oldest retained

  struct Batch {
    torch::Tensor states;       // [B, state_dim] float
    torch::Tensor actions;      // [B, 1]
    torch::Tensor rewards;      // [B, 1]
    torch::Tensor next_states;  // [B, state_dim]
    torch::Tensor dones;        // [B, 1]
  };
  Batch sample(int64_t batch_size, Rng& rng) const;

 private:
  int64_t slot(int64_t logical) const;
  int64_t capacity_;
  int64_t size_ = 0;
  int64_t head_ = 0;  // next write position
  std::vector<float> states_, actions_, rewards_, next_states_, dones_;
};

struct SacLosses {
  double critic = 0.0;
  double actor = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;
};

class ActorNetImpl;
class CriticNetImpl;

// Twin-critic SAC with squashed-Gaussian policy and automatic entropy
// temperature, over the 4-D search state and 1-D step action.
class SacAgent : public ActionPolicy {
 public:
  explicit SacAgent(AgentConfig cfg);

  double propose(const SearchState& state, bool deterministic) override;
  std::vector<double> propose_batch(const std::vector<SearchState>& states,
                                    bool deterministic) override;
  std::pair<double, double> action_bounds() const override {
    return {cfg_.action_low, cfg_.action_high};
  }

  ReplayBuffer& buffer() { return buffer_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const AgentConfig& config() const { return cfg_; }

  // One gradient step on both critics, the actor and the temperature,
  // followed by a target soft update. No-op (nullopt) while the buffer
  // holds fewer than batch_size transitions.
  std::optional<SacLosses> update();

  void soft_update_targets(double tau);

  double alpha() const;
  int64_t updates_done() const { return updates_; }

  void save(const std::string& dir) const;
  static std::unique_ptr<SacAgent> load(const std::string& dir);

  // test access: critic-1 value for a (state, action) pair
  double q1_value(const SearchState& s, double action);

 private:
  // (env actions [B,1], log-probs [B,1]); reparameterized when rsample.
  std::pair<torch::Tensor, torch::Tensor> sample_action(const torch::Tensor& states,
                                                        bool rsample);
  torch::Tensor states_to_tensor(const std::vector<SearchState>& states) const;

  AgentConfig cfg_;
  ReplayBuffer buffer_;
  std::shared_ptr<ActorNetImpl> actor_;
  std::shared_ptr<CriticNetImpl> critic1_, critic2_, target1_, target2_;
  torch::Tensor log_alpha_;
  std::unique_ptr<torch::optim::Adam> actor_opt_, critic_opt_, alpha_opt_;
  Rng rng_;
  int64_t updates_ = 0;
  double scale_ = 0.0, bias_ = 0.0;
};

}  // namespace marginal
