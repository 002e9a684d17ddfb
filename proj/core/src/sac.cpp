#include "marginal/sac.hpp"

#include <filesystem>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace marginal {

void AgentConfig::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw ContractError("AgentConfig: tau in (0,1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ContractError("AgentConfig: gamma in [0,1)");
  if (!(action_low < action_high)) {
    throw ContractError("AgentConfig: action_low must be below action_high");
  }
  if (buffer_capacity < 1 || batch_size < 1) {
    throw ContractError("AgentConfig: capacity and batch size must be positive");
  }
}

ReplayBuffer::ReplayBuffer(int64_t capacity) : capacity_(capacity) {
  if (capacity < 1) throw ContractError("ReplayBuffer: capacity must be positive");
  states_.resize(static_cast<size_t>(capacity) * 4);
  actions_.resize(static_cast<size_t>(capacity));
  rewards_.resize(static_cast<size_t>(capacity));
  next_states_.resize(static_cast<size_t>(capacity) * 4);
  dones_.resize(static_cast<size_t>(capacity));
}

int64_t ReplayBuffer::slot(int64_t logical) const {
  // oldest element sits at head_ - size_ (mod capacity)
  return ((head_ - size_ + logical) % capacity_ + capacity_) % capacity_;
}

void ReplayBuffer::store(const Transition& t) {
  const auto i = static_cast<size_t>(head_);
  auto put_state = [](std::vector<float>& v, size_t at, const SearchState& s) {
    v[at * 4 + 0] = static_cast<float>(s.p_true);
    v[at * 4 + 1] = static_cast<float>(s.p_rival);
    v[at * 4 + 2] = static_cast<float>(s.eps_total_norm);
    v[at * 4 + 3] = static_cast<float>(s.eps_last_norm);
  };
  put_state(states_, i, t.state);
  put_state(next_states_, i, t.next_state);
  actions_[i] = static_cast<float>(t.action);
  rewards_[i] = static_cast<float>(t.reward);
  dones_[i] = t.done ? 1.0f : 0.0f;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

Transition ReplayBuffer::at(int64_t logical) const {
  if (logical < 0 || logical >= size_) throw ContractError("ReplayBuffer::at: out of range");
  const auto i = static_cast<size_t>(slot(logical));
  auto get_state = [](const std::vector<float>& v, size_t at) {
    return SearchState{v[at * 4 + 0], v[at * 4 + 1], v[at * 4 + 2], v[at * 4 + 3]};
  };
  return Transition{get_state(states_, i), actions_[i], rewards_[i],
                    get_state(next_states_, i), dones_[i] > 0.5f};
}

ReplayBuffer::Batch ReplayBuffer::sample(int64_t batch_size, Rng& rng) const {
  if (batch_size > size_) throw ContractError("ReplayBuffer::sample: batch exceeds size");
  // Floyd's sampling: batch_size distinct slots in [0, size_)
  std::unordered_set<int64_t> chosen;
  chosen.reserve(static_cast<size_t>(batch_size) * 2);
  for (int64_t i = size_ - batch_size; i < size_; ++i) {
    std::uniform_int_distribution<int64_t> d(0, i);
    const int64_t j = d(rng);
    if (!chosen.insert(j).second) chosen.insert(i);
  }
  Batch b;
  b.states = torch::empty({batch_size, 4}, torch::kFloat);
  b.actions = torch::empty({batch_size, 1}, torch::kFloat);
  b.rewards = torch::empty({batch_size, 1}, torch::kFloat);
  b.next_states = torch::empty({batch_size, 4}, torch::kFloat);
  b.dones = torch::empty({batch_size, 1}, torch::kFloat);
  auto sa = b.states.accessor<float, 2>();
  auto aa = b.actions.accessor<float, 2>();
  auto ra = b.rewards.accessor<float, 2>();
  auto na = b.next_states.accessor<float, 2>();
  auto da = b.dones.accessor<float, 2>();
  int64_t row = 0;
  for (const auto logical : chosen) {
    const auto i = static_cast<size_t>(slot(logical));
    for (int c = 0; c < 4; ++c) {
      sa[row][c] = states_[i * 4 + static_cast<size_t>(c)];
      na[row][c] = next_states_[i * 4 + static_cast<size_t>(c)];
    }
    aa[row][0] = actions_[i];
    ra[row][0] = rewards_[i];
    da[row][0] = dones_[i];
    ++row;
  }
  return b;
}

class ActorNetImpl : public torch::nn::Module {
 public:
  ActorNetImpl(int in, int h1, int h2) {
    l1_ = register_module("l1", torch::nn::Linear(in, h1));
    l2_ = register_module("l2", torch::nn::Linear(h1, h2));
    mean_ = register_module("mean", torch::nn::Linear(h2, 1));
    log_std_ = register_module("log_std", torch::nn::Linear(h2, 1));
  }
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& s) {
    auto h = torch::relu(l1_->forward(s));
    h = torch::relu(l2_->forward(h));
    return {mean_->forward(h), log_std_->forward(h)};
  }

 private:
  torch::nn::Linear l1_{nullptr}, l2_{nullptr}, mean_{nullptr}, log_std_{nullptr};
};

class CriticNetImpl : public torch::nn::Module {
 public:
  CriticNetImpl(int state_dim, int h1, int h2) {
    l1_ = register_module("l1", torch::nn::Linear(state_dim + 1, h1));
    l2_ = register_module("l2", torch::nn::Linear(h1, h2));
    out_ = register_module("out", torch::nn::Linear(h2, 1));
  }
  torch::Tensor forward(const torch::Tensor& s, const torch::Tensor& a) {
    auto h = torch::relu(l1_->forward(torch::cat({s, a}, 1)));
    h = torch::relu(l2_->forward(h));
    return out_->forward(h);
  }

 private:
  torch::nn::Linear l1_{nullptr}, l2_{nullptr}, out_{nullptr};
};

SacAgent::SacAgent(AgentConfig cfg)
    : cfg_(cfg),
      buffer_(cfg.buffer_capacity),
      rng_(derive_seed(cfg.seed, 0x5ac)) {
  cfg_.validate();
  scale_ = (cfg_.action_high - cfg_.action_low) / 2.0;
  bias_ = (cfg_.action_high + cfg_.action_low) / 2.0;
  actor_ = std::make_shared<ActorNetImpl>(cfg_.state_dim, cfg_.hidden1, cfg_.hidden2);
  critic1_ = std::make_shared<CriticNetImpl>(cfg_.state_dim, cfg_.hidden1, cfg_.hidden2);
  critic2_ = std::make_shared<CriticNetImpl>(cfg_.state_dim, cfg_.hidden1, cfg_.hidden2);
  target1_ = std::make_shared<CriticNetImpl>(cfg_.state_dim, cfg_.hidden1, cfg_.hidden2);
  target2_ = std::make_shared<CriticNetImpl>(cfg_.state_dim, cfg_.hidden1, cfg_.hidden2);
  {
    torch::NoGradGuard g;
    auto src1 = critic1_->parameters();
    auto dst1 = target1_->parameters();
    for (size_t i = 0; i < src1.size(); ++i) dst1[i].copy_(src1[i]);
    auto src2 = critic2_->parameters();
    auto dst2 = target2_->parameters();
    for (size_t i = 0; i < src2.size(); ++i) dst2[i].copy_(src2[i]);
  }
  for (auto& p : target1_->parameters()) p.set_requires_grad(false);
  for (auto& p : target2_->parameters()) p.set_requires_grad(false);
  log_alpha_ = torch::zeros({1}, torch::requires_grad(true));
  actor_opt_ = std::make_unique<torch::optim::Adam>(
      actor_->parameters(), torch::optim::AdamOptions(cfg_.learning_rate));
  std::vector<torch::Tensor> critic_params = critic1_->parameters();
  for (auto& p : critic2_->parameters()) critic_params.push_back(p);
  critic_opt_ = std::make_unique<torch::optim::Adam>(
      critic_params, torch::optim::AdamOptions(cfg_.learning_rate));
  alpha_opt_ = std::make_unique<torch::optim::Adam>(
      std::vector<torch::Tensor>{log_alpha_},
      torch::optim::AdamOptions(cfg_.learning_rate));
}

double SacAgent::alpha() const { return std::exp(log_alpha_.item<double>()); }

torch::Tensor SacAgent::states_to_tensor(const std::vector<SearchState>& states) const {
  auto t = torch::empty({static_cast<int64_t>(states.size()), 4}, torch::kFloat);
  auto a = t.accessor<float, 2>();
  for (size_t i = 0; i < states.size(); ++i) {
    a[static_cast<int64_t>(i)][0] = static_cast<float>(states[i].p_true);
    a[static_cast<int64_t>(i)][1] = static_cast<float>(states[i].p_rival);
    a[static_cast<int64_t>(i)][2] = static_cast<float>(states[i].eps_total_norm);
    a[static_cast<int64_t>(i)][3] = static_cast<float>(states[i].eps_last_norm);
  }
  return t;
}

std::pair<torch::Tensor, torch::Tensor> SacAgent::sample_action(
    const torch::Tensor& states, bool rsample) {
  auto [mean, log_std] = actor_->forward(states);
  log_std = log_std.clamp(cfg_.log_std_min, cfg_.log_std_max);
  auto std = log_std.exp();
  (void)rsample;  // callers run non-reparameterized paths under NoGradGuard
  auto u = mean + std * torch::randn_like(mean);
  auto tanh_u = torch::tanh(u);
  auto action = bias_ + scale_ * tanh_u;
  // log N(u; mean, std) with the tanh-and-rescale change of variables
  auto log_prob = -0.5 * ((u - mean) / std).pow(2) - log_std -
                  0.5 * std::log(2.0 * M_PI);
  log_prob = log_prob - torch::log(scale_ * (1.0 - tanh_u.pow(2)) + 1e-6);
  return {action, log_prob.sum(1, /*keepdim=*/true)};
}

double SacAgent::propose(const SearchState& state, bool deterministic) {
  return propose_batch({state}, deterministic)[0];
}

std::vector<double> SacAgent::propose_batch(const std::vector<SearchState>& states,
                                            bool deterministic) {
  std::vector<double> out(states.size());
  if (!deterministic && buffer_.size() < cfg_.warmup_transitions) {
    std::uniform_real_distribution<double> uni(cfg_.action_low, cfg_.action_high);
    for (auto& v : out) v = uni(rng_);
    return out;
  }
  torch::NoGradGuard g;
  auto s = states_to_tensor(states);
  torch::Tensor a;
  if (deterministic) {
    auto [mean, log_std] = actor_->forward(s);
    (void)log_std;
    a = bias_ + scale_ * torch::tanh(mean);
  } else {
    a = sample_action(s, /*rsample=*/false).first;
  }
  auto acc = a.accessor<float, 2>();
  for (size_t i = 0; i < states.size(); ++i) {
    out[i] = std::clamp(static_cast<double>(acc[static_cast<int64_t>(i)][0]),
                        cfg_.action_low, cfg_.action_high);
  }
  return out;
}

std::optional<SacLosses> SacAgent::update() {
  if (buffer_.size() < cfg_.batch_size) return std::nullopt;
  auto batch = buffer_.sample(cfg_.batch_size, rng_);

  torch::Tensor target_q;
  {
    torch::NoGradGuard g;
    auto [a2, logp2] = sample_action(batch.next_states, /*rsample=*/false);
    auto q1t = target1_->forward(batch.next_states, a2);
    auto q2t = target2_->forward(batch.next_states, a2);
    auto soft_v = torch::min(q1t, q2t) - static_cast<float>(alpha()) * logp2;
    target_q = batch.rewards + cfg_.gamma * (1.0 - batch.dones) * soft_v;
  }
  auto q1 = critic1_->forward(batch.states, batch.actions);
  auto q2 = critic2_->forward(batch.states, batch.actions);
  auto critic_loss = torch::mse_loss(q1, target_q) + torch::mse_loss(q2, target_q);
  critic_opt_->zero_grad();
  critic_loss.backward();
  critic_opt_->step();

  auto [a_new, logp] = sample_action(batch.states, /*rsample=*/true);
  auto q_new = torch::min(critic1_->forward(batch.states, a_new),
                          critic2_->forward(batch.states, a_new));
  auto actor_loss = (static_cast<float>(alpha()) * logp - q_new).mean();
  actor_opt_->zero_grad();
  critic_opt_->zero_grad();  // discard actor-loss gradients routed through critics
  actor_loss.backward();
  actor_opt_->step();

  auto alpha_loss =
      -(log_alpha_ * (logp.detach() + cfg_.target_entropy).to(torch::kFloat)).mean();
  alpha_opt_->zero_grad();
  alpha_loss.backward();
  alpha_opt_->step();

  soft_update_targets(cfg_.tau);
  ++updates_;
  return SacLosses{critic_loss.item<double>(), actor_loss.item<double>(),
                   alpha_loss.item<double>(), alpha(),
                   -logp.mean().item<double>()};
}

void SacAgent::soft_update_targets(double tau) {
  if (tau < 0.0 || tau > 1.0) throw ContractError("soft_update_targets: tau in [0,1]");
  torch::NoGradGuard g;
  auto blend = [tau](CriticNetImpl& online, CriticNetImpl& target) {
    auto op = online.parameters();
    auto tp = target.parameters();
    for (size_t i = 0; i < op.size(); ++i) {
      tp[i].mul_(1.0 - tau).add_(op[i], tau);
    }
  };
  blend(*critic1_, *target1_);
  blend(*critic2_, *target2_);
}

double SacAgent::q1_value(const SearchState& s, double action) {
  torch::NoGradGuard g;
  auto st = states_to_tensor({s});
  auto a = torch::full({1, 1}, action, torch::kFloat);
  return critic1_->forward(st, a).item<double>();
}

void SacAgent::save(const std::string& dir) const {
  fs::create_directories(dir);
  auto dump = [&](const std::shared_ptr<torch::nn::Module>& m, const char* name) {
    torch::save(m, (fs::path(dir) / name).string());
  };
  dump(actor_, "actor.pt");
  dump(critic1_, "critic1.pt");
  dump(critic2_, "critic2.pt");
  dump(target1_, "target1.pt");
  dump(target2_, "target2.pt");
  {
    torch::NoGradGuard g;
    torch::save(log_alpha_, (fs::path(dir) / "log_alpha.pt").string());
  }
  json meta = {{"format_version", 1},
               {"kind", "sac_agent"},
               {"state_dim", cfg_.state_dim},
               {"batch_size", cfg_.batch_size},
               {"hidden1", cfg_.hidden1},
               {"hidden2", cfg_.hidden2},
               {"learning_rate", cfg_.learning_rate},
               {"buffer_capacity", cfg_.buffer_capacity},
               {"gamma", cfg_.gamma},
               {"tau", cfg_.tau},
               {"action_low", cfg_.action_low},
               {"action_high", cfg_.action_high},
               {"warmup_transitions", cfg_.warmup_transitions},
               {"target_entropy", cfg_.target_entropy},
               {"seed", cfg_.seed}};
  std::ofstream out(fs::path(dir) / "agent.json");
  out << meta.dump(2) << "\n";
}

std::unique_ptr<SacAgent> SacAgent::load(const std::string& dir) {
  const auto meta_path = fs::path(dir) / "agent.json";
  if (!fs::exists(meta_path)) {
    throw CheckpointError("agent checkpoint missing under " + dir);
  }
  json meta;
  std::ifstream(meta_path) >> meta;
  if (meta.value("format_version", 0) != 1 || meta.value("kind", "") != "sac_agent") {
    throw CheckpointError("unsupported agent checkpoint in " + dir);
  }
  AgentConfig cfg;
  cfg.state_dim = meta.at("state_dim");
  cfg.batch_size = meta.at("batch_size");
  cfg.hidden1 = meta.at("hidden1");
  cfg.hidden2 = meta.at("hidden2");
  cfg.learning_rate = meta.at("learning_rate");
  cfg.buffer_capacity = meta.at("buffer_capacity");
  cfg.gamma = meta.at("gamma");
  cfg.tau = meta.at("tau");
  cfg.action_low = meta.at("action_low");
  cfg.action_high = meta.at("action_high");
  cfg.warmup_transitions = meta.at("warmup_transitions");
  cfg.target_entropy = meta.at("target_entropy");
  cfg.seed = meta.at("seed");
  auto agent = std::make_unique<SacAgent>(cfg);
  auto pull = [&](std::shared_ptr<torch::nn::Module> m, const char* name) {
    torch::load(m, (fs::path(dir) / name).string());
  };
  pull(agent->actor_, "actor.pt");
  pull(agent->critic1_, "critic1.pt");
  pull(agent->critic2_, "critic2.pt");
  pull(agent->target1_, "target1.pt");
  pull(agent->target2_, "target2.pt");
  torch::Tensor stored;
  torch::load(stored, (fs::path(dir) / "log_alpha.pt").string());
  {
    torch::NoGradGuard g;
    agent->log_alpha_.copy_(stored);  // keep the optimizer's reference alive
  }
  return agent;
}

}  // namespace marginal
