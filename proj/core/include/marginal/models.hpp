#pragma once

#include <memory>
#include <string>

#include <torch/torch.h>

#include "marginal/margin.hpp"

namespace marginal {

// Common base so handles and trainers can hold any of the architectures.
class ImageClassifierImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
  virtual std::string arch_name() const = 0;
  ~ImageClassifierImpl() override = default;
};
using ImageClassifier = std::shared_ptr<ImageClassifierImpl>;

// 1x28x28 -> 10 logits: two strided 4x4 convs, then 1568-100-10 dense head.
class MnistCnnImpl : public ImageClassifierImpl {
 public:
  MnistCnnImpl();
  torch::Tensor forward(const torch::Tensor& x) override;
  std::string arch_name() const override { return "mnist_cnn"; }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};

// PreActResNet-18 with the 3x32x32 stem, 10-way head by default.
class PreActResNet18Impl : public ImageClassifierImpl {
 public:
  explicit PreActResNet18Impl(int num_classes = 10);
  torch::Tensor forward(const torch::Tensor& x) override;
  std::string arch_name() const override { return "preact_resnet18"; }

 private:
  torch::Tensor block(const torch::Tensor& x, int stage, int idx);
  torch::nn::Conv2d stem_{nullptr};
  std::vector<torch::nn::BatchNorm2d> bn1_, bn2_;
  std::vector<torch::nn::Conv2d> conv1_, conv2_, shortcut_;
  std::vector<bool> has_shortcut_;
  std::vector<int> strides_;
  torch::nn::BatchNorm2d bn_final_{nullptr};
  torch::nn::Linear fc_{nullptr};
};

ImageClassifier make_image_classifier(const std::string& arch, int num_classes = 10);

// ClassifierHandle over a torch module. Evaluation semantics throughout:
// the wrapped module is put in eval mode and treated as a frozen snapshot.
class TorchClassifier : public ClassifierHandle {
 public:
  TorchClassifier(ImageClassifier net, int64_t num_classes);

  torch::Tensor input_grad(const torch::Tensor& x,
                           const torch::Tensor& y) const override;
  int64_t num_classes() const override { return num_classes_; }
  const ImageClassifier& net() const { return net_; }

 protected:
  torch::Tensor predict_probs_impl(const torch::Tensor& x) const override;

 private:
  ImageClassifier net_;
  int64_t num_classes_;
};

// Two-class linear model with logits (w.x + b, -(w.x + b)): the boundary
// crossing along the sign-gradient direction has a closed form, which makes
// it the ground-truth oracle for the distance searches.
struct SyntheticLinearSpec {
  torch::Tensor w;  // [dims...], kDouble
  double b = 0.0;
};

class SyntheticLinearModel : public ClassifierHandle {
 public:
  explicit SyntheticLinearModel(SyntheticLinearSpec spec);

  torch::Tensor input_grad(const torch::Tensor& x,
                           const torch::Tensor& y) const override;
  int64_t num_classes() const override { return 2; }
  const SyntheticLinearSpec& spec() const { return spec_; }

 protected:
  torch::Tensor predict_probs_impl(const torch::Tensor& x) const override;

 private:
  torch::Tensor margin_of(const torch::Tensor& x) const;  // [B]
  SyntheticLinearSpec spec_;
};

// Smallest epsilon with an argmax flip along the sign-gradient direction,
// in closed form: |w.x + b| / sum_i |w_i|.
double analytic_margin(const SyntheticLinearSpec& spec, const torch::Tensor& x);

// Classifier checkpoint I/O: <dir>/model.pt plus a versioned meta file.
void save_classifier(const ImageClassifier& net, int num_classes,
                     const std::string& dir);
ImageClassifier load_classifier(const std::string& dir,
                                const std::string& expect_arch = "",
                                int* num_classes_out = nullptr);

}  // namespace marginal
