#include "marginal/models.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace marginal {

MnistCnnImpl::MnistCnnImpl() {
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 4).stride(2).padding(1)));
  conv2_ = register_module(
      "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 32, 4).stride(2).padding(1)));
  // 32 channels at 7x7 after the two strided convs.
  fc1_ = register_module("fc1", torch::nn::Linear(32 * 7 * 7, 100));
  fc2_ = register_module("fc2", torch::nn::Linear(100, 10));
}

torch::Tensor MnistCnnImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(conv1_->forward(x));
  h = torch::relu(conv2_->forward(h));
  h = h.flatten(1);
  h = torch::relu(fc1_->forward(h));
  return fc2_->forward(h);
}

namespace {
torch::nn::Conv2d conv3x3(int in, int out, int stride) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}
}  // namespace

PreActResNet18Impl::PreActResNet18Impl(int num_classes) {
  stem_ = register_module("stem", conv3x3(3, 64, 1));
  const int plan[4][2] = {{64, 1}, {128, 2}, {256, 2}, {512, 2}};
  int in = 64;
  int id = 0;
  for (int stage = 0; stage < 4; ++stage) {
    const int width = plan[stage][0];
    for (int b = 0; b < 2; ++b) {
      const int stride = (b == 0) ? plan[stage][1] : 1;
      auto tag = std::to_string(id++);
      bn1_.push_back(register_module("bn1_" + tag, torch::nn::BatchNorm2d(in)));
      conv1_.push_back(register_module("conv1_" + tag, conv3x3(in, width, stride)));
      bn2_.push_back(register_module("bn2_" + tag, torch::nn::BatchNorm2d(width)));
      conv2_.push_back(register_module("conv2_" + tag, conv3x3(width, width, 1)));
      const bool needs = (stride != 1) || (in != width);
      has_shortcut_.push_back(needs);
      if (needs) {
        shortcut_.push_back(register_module(
            "short_" + tag,
            torch::nn::Conv2d(
                torch::nn::Conv2dOptions(in, width, 1).stride(stride).bias(false))));
      } else {
        shortcut_.push_back(nullptr);
      }
      strides_.push_back(stride);
      in = width;
    }
  }
  bn_final_ = register_module("bn_final", torch::nn::BatchNorm2d(512));
  fc_ = register_module("fc", torch::nn::Linear(512, num_classes));
}

torch::Tensor PreActResNet18Impl::forward(const torch::Tensor& x) {
  auto h = stem_->forward(x);
  for (size_t i = 0; i < conv1_.size(); ++i) {
    auto pre = torch::relu(bn1_[i]->forward(h));
    auto residual = has_shortcut_[i] ? shortcut_[i]->forward(pre) : h;
    auto out = conv1_[i]->forward(pre);
    out = conv2_[i]->forward(torch::relu(bn2_[i]->forward(out)));
    h = out + residual;
  }
  h = torch::relu(bn_final_->forward(h));
  h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
  return fc_->forward(h);
}

ImageClassifier make_image_classifier(const std::string& arch, int num_classes) {
  if (arch == "mnist_cnn") {
    if (num_classes != 10) throw ContractError("mnist_cnn is a 10-class head");
    return std::make_shared<MnistCnnImpl>();
  }
  if (arch == "preact_resnet18") {
    return std::make_shared<PreActResNet18Impl>(num_classes);
  }
  throw ContractError("unknown architecture: " + arch);
}

TorchClassifier::TorchClassifier(ImageClassifier net, int64_t num_classes)
    : net_(std::move(net)), num_classes_(num_classes) {}

torch::Tensor TorchClassifier::predict_probs_impl(const torch::Tensor& x) const {
  torch::NoGradGuard guard;
  const bool was_training = net_->is_training();
  net_->eval();
  auto logits = net_->forward(x.to(torch::kFloat));
  if (was_training) net_->train();
  return torch::softmax(logits, 1).to(torch::kDouble);
}

torch::Tensor TorchClassifier::input_grad(const torch::Tensor& x,
                                          const torch::Tensor& y) const {
  const bool was_training = net_->is_training();
  net_->eval();
  auto xf = x.to(torch::kFloat).detach().requires_grad_(true);
  auto logits = net_->forward(xf);
  auto loss = torch::cross_entropy_loss(logits, y, {}, torch::Reduction::Sum);
  auto grads = torch::autograd::grad({loss}, {xf});
  if (was_training) net_->train();
  return grads[0].to(torch::kDouble);
}

SyntheticLinearModel::SyntheticLinearModel(SyntheticLinearSpec spec)
    : spec_(std::move(spec)) {
  if (spec_.w.abs().sum().item<double>() == 0.0) {
    throw ContractError("SyntheticLinearModel: w must be nonzero");
  }
  spec_.w = spec_.w.to(torch::kDouble);
}

torch::Tensor SyntheticLinearModel::margin_of(const torch::Tensor& x) const {
  auto flat = x.to(torch::kDouble).flatten(1);
  return flat.matmul(spec_.w.flatten()) + spec_.b;
}

torch::Tensor SyntheticLinearModel::predict_probs_impl(const torch::Tensor& x) const {
  auto m = margin_of(x);
  auto p0 = torch::sigmoid(2.0 * m);
  return torch::stack({p0, 1.0 - p0}, 1);
}

torch::Tensor SyntheticLinearModel::input_grad(const torch::Tensor& x,
                                               const torch::Tensor& y) const {
  // L = -log p_y with p_0 = sigma(2m): dL/dm = -2(1-p0) for y=0, +2 p0 for y=1.
  auto m = margin_of(x);
  auto p0 = torch::sigmoid(2.0 * m);
  auto yk = y.to(torch::kDouble);
  auto coef = (1.0 - yk) * (-2.0 * (1.0 - p0)) + yk * (2.0 * p0);  // [B]
  auto shape = std::vector<int64_t>{x.size(0)};
  for (int64_t i = 1; i < x.dim(); ++i) shape.push_back(1);
  return coef.view(shape) * spec_.w.unsqueeze(0);
}

double analytic_margin(const SyntheticLinearSpec& spec, const torch::Tensor& x) {
  auto w = spec.w.to(torch::kDouble).flatten();
  const double m =
      x.to(torch::kDouble).flatten().dot(w).item<double>() + spec.b;
  const double denom = w.abs().sum().item<double>();
  return std::abs(m) / denom;
}

void save_classifier(const ImageClassifier& net, int num_classes,
                     const std::string& dir) {
  fs::create_directories(dir);
  torch::save(std::static_pointer_cast<torch::nn::Module>(net),
              (fs::path(dir) / "model.pt").string());
  json meta = {{"format_version", 1},
               {"arch", net->arch_name()},
               {"num_classes", num_classes}};
  std::ofstream out(fs::path(dir) / "model.json");
  out << meta.dump(2) << "\n";
}

ImageClassifier load_classifier(const std::string& dir,
                                const std::string& expect_arch,
                                int* num_classes_out) {
  const auto meta_path = fs::path(dir) / "model.json";
  const auto weights_path = fs::path(dir) / "model.pt";
  if (!fs::exists(meta_path) || !fs::exists(weights_path)) {
    throw CheckpointError("classifier checkpoint missing under " + dir);
  }
  json meta;
  std::ifstream(meta_path) >> meta;
  if (meta.value("format_version", 0) != 1) {
    throw CheckpointError("unsupported classifier checkpoint version in " + dir);
  }
  const std::string arch = meta.at("arch");
  if (!expect_arch.empty() && arch != expect_arch) {
    throw CheckpointError("checkpoint arch '" + arch + "' does not match '" +
                          expect_arch + "'");
  }
  const int classes = meta.at("num_classes");
  auto net = make_image_classifier(arch, classes);
  auto base = std::static_pointer_cast<torch::nn::Module>(net);
  torch::load(base, weights_path.string());
  if (num_classes_out) *num_classes_out = classes;
  return net;
}

}  // namespace marginal
