#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace dscm::nets {

/// How the condition enters the timestep embedding for a batch.
///   values     [B, cond_dim] condition vectors (undefined = every sample unconditional)
///   null_mask  [B] bool, true where the guidance token replaces the condition
///   token      [D] or [B, D] override for the learned guidance token
struct Conditioning {
  torch::Tensor values;
  torch::Tensor null_mask;
  torch::Tensor token;

  static Conditioning on(torch::Tensor values) { return {std::move(values), {}, {}}; }
  static Conditioning null(int64_t batch, torch::Tensor token = {});
};

struct UNetOptions {
  int64_t in_channels = 1;
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mult{1, 4, 8};
  int64_t res_blocks = 1;
  int64_t cond_dim = 13;
  int64_t groups = 8;

  int64_t embed_dim() const { return 4 * base_channels; }
  nlohmann::json to_json() const;
  static UNetOptions from_json(const nlohmann::json& j);
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t embed_dim, int64_t groups, double dropout = 0.0);
  /// emb may be undefined for blocks without an embedding input.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};
  torch::nn::Dropout drop{nullptr};
};
TORCH_MODULE(ResBlock);

/// Conditional noise estimator. The condition projection (or the guidance
/// token) is added to the timestep embedding.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(UNetOptions options);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond);
  /// Timestep embedding plus condition embedding, [B, embed_dim].
  torch::Tensor embed(const torch::Tensor& t, const Conditioning& cond, int64_t batch);

  const UNetOptions& options() const { return options_; }
  const torch::Tensor& null_token() const { return null_token_; }

 private:
  UNetOptions options_;
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Linear cond_proj{nullptr};
  torch::Tensor null_token_;
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down_blocks, up_blocks, downsamplers, upsamplers;
  ResBlock mid1{nullptr}, mid2{nullptr};
  std::vector<int64_t> skip_channels_;
};
TORCH_MODULE(UNet);

struct EncoderOptions {
  int64_t in_channels = 1;
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mult{1, 2, 4, 8};
  int64_t z_dim = 8;
  int64_t groups = 8;
  double dropout = 0.1;

  nlohmann::json to_json() const;
  static EncoderOptions from_json(const nlohmann::json& j);
};

struct Posterior {
  torch::Tensor mean;
  torch::Tensor logvar;
};

/// CNN producing the mean and log-variance of a diagonal Gaussian over z.
class SemanticEncoderImpl : public torch::nn::Module {
 public:
  explicit SemanticEncoderImpl(EncoderOptions options);
  Posterior forward(const torch::Tensor& x);
  const EncoderOptions& options() const { return options_; }

 private:
  EncoderOptions options_;
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::ModuleList blocks, downsamplers;
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(SemanticEncoder);

/// Flatten -> 784 -> 128 -> 64 -> 10 with ReLU.
class DigitClassifierImpl : public torch::nn::Module {
 public:
  DigitClassifierImpl();
  torch::Tensor forward(const torch::Tensor& x);
  /// Activations of the last hidden layer, [B, 64].
  torch::Tensor features(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, fc3{nullptr};
};
TORCH_MODULE(DigitClassifier);

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

/// dst <- src for every parameter and buffer (same architecture).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);
/// dst <- decay * dst + (1 - decay) * src
void ema_update(torch::nn::Module& dst, const torch::nn::Module& src, double decay);

}  // namespace dscm::nets
