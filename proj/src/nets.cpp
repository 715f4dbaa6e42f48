#include "dscm/nets.hpp"

#include <cmath>

#include "dscm/error.hpp"

namespace dscm::nets {

namespace nn = torch::nn;

Conditioning Conditioning::null(int64_t batch, torch::Tensor token) {
  Conditioning c;
  c.null_mask = torch::ones({batch}, torch::kBool);
  c.token = std::move(token);
  return c;
}

nlohmann::json UNetOptions::to_json() const {
  return {{"in_channels", in_channels}, {"base_channels", base_channels}, {"channel_mult", channel_mult},
          {"res_blocks", res_blocks},   {"cond_dim", cond_dim},           {"groups", groups}};
}

UNetOptions UNetOptions::from_json(const nlohmann::json& j) {
  UNetOptions o;
  o.in_channels = j.at("in_channels");
  o.base_channels = j.at("base_channels");
  o.channel_mult = j.at("channel_mult").get<std::vector<int64_t>>();
  o.res_blocks = j.at("res_blocks");
  o.cond_dim = j.at("cond_dim");
  o.groups = j.at("groups");
  return o;
}

nlohmann::json EncoderOptions::to_json() const {
  return {{"in_channels", in_channels}, {"base_channels", base_channels}, {"channel_mult", channel_mult},
          {"z_dim", z_dim},             {"groups", groups},               {"dropout", dropout}};
}

EncoderOptions EncoderOptions::from_json(const nlohmann::json& j) {
  EncoderOptions o;
  o.in_channels = j.at("in_channels");
  o.base_channels = j.at("base_channels");
  o.channel_mult = j.at("channel_mult").get<std::vector<int64_t>>();
  o.z_dim = j.at("z_dim");
  o.groups = j.at("groups");
  o.dropout = j.at("dropout");
  return o;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / static_cast<double>(half));
  auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1})}, 1);
  return emb;
}

// ------------------------------------------------------------------ blocks

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t embed_dim, int64_t groups, double dropout) {
  norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(groups, in)));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(groups, out)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  drop = register_module("drop", nn::Dropout(dropout));
  if (embed_dim > 0) emb_proj = register_module("emb_proj", nn::Linear(embed_dim, out));
  if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  torch::NoGradGuard ng;
  conv2->weight.zero_();
  conv2->bias.zero_();
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(torch::silu(norm1(x)));
  if (emb_proj && emb.defined()) h = h + emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(drop(torch::silu(norm2(h))));
  return (skip ? skip(x) : x) + h;
}

// ------------------------------------------------------------------ UNet

UNetImpl::UNetImpl(UNetOptions options) : options_(std::move(options)) {
  const int64_t C = options_.base_channels;
  const int64_t E = options_.embed_dim();
  const int64_t G = options_.groups;
  if (options_.channel_mult.empty()) throw ArgumentError("UNet needs at least one resolution level");

  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(C, E), nn::SiLU(), nn::Linear(E, E)));
  cond_proj = register_module("cond_proj", nn::Linear(options_.cond_dim, E));
  null_token_ = register_parameter("null_token", torch::zeros({E}));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(options_.in_channels, C, 3).padding(1)));

  down_blocks = register_module("down_blocks", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  up_blocks = register_module("up_blocks", nn::ModuleList());
  upsamplers = register_module("upsamplers", nn::ModuleList());

  const auto& mult = options_.channel_mult;
  const std::size_t levels = mult.size();
  int64_t ch = C;
  skip_channels_.push_back(ch);
  for (std::size_t l = 0; l < levels; ++l) {
    for (int64_t b = 0; b < options_.res_blocks; ++b) {
      down_blocks->push_back(ResBlock(ch, C * mult[l], E, G));
      ch = C * mult[l];
      skip_channels_.push_back(ch);
    }
    if (l + 1 < levels) {
      downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
      skip_channels_.push_back(ch);
    }
  }
  mid1 = register_module("mid1", ResBlock(ch, ch, E, G));
  mid2 = register_module("mid2", ResBlock(ch, ch, E, G));

  std::vector<int64_t> skips = skip_channels_;
  for (std::size_t l = levels; l-- > 0;) {
    for (int64_t b = 0; b < options_.res_blocks + 1; ++b) {
      int64_t s = skips.back();
      skips.pop_back();
      up_blocks->push_back(ResBlock(ch + s, C * mult[l], E, G));
      ch = C * mult[l];
    }
    if (l > 0) upsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1)));
  }
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(G, ch)));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(ch, options_.in_channels, 3).padding(1)));
  torch::NoGradGuard ng;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

torch::Tensor UNetImpl::embed(const torch::Tensor& t, const Conditioning& cond, int64_t batch) {
  auto emb = time_mlp->forward(timestep_embedding(t, options_.base_channels));
  const int64_t E = options_.embed_dim();
  torch::Tensor token = cond.token.defined() ? cond.token : null_token_;
  torch::Tensor null_emb = token.dim() == 1 ? token.unsqueeze(0).expand({batch, E}) : token;
  torch::Tensor c;
  if (!cond.values.defined()) {
    c = null_emb;
  } else {
    if (cond.values.size(1) != options_.cond_dim) throw ArgumentError("condition width does not match the model");
    c = cond_proj(cond.values);
    if (cond.null_mask.defined()) c = torch::where(cond.null_mask.unsqueeze(1), null_emb, c);
  }
  return emb + c;
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const Conditioning& cond) {
  const int64_t B = x.size(0);
  torch::Tensor tt = t.dim() == 0 ? t.expand({B}) : t;
  auto emb = embed(tt, cond, B);

  std::vector<torch::Tensor> hs;
  auto h = conv_in(x);
  hs.push_back(h);
  std::size_t block = 0, down = 0;
  const std::size_t levels = options_.channel_mult.size();
  for (std::size_t l = 0; l < levels; ++l) {
    for (int64_t b = 0; b < options_.res_blocks; ++b) {
      h = down_blocks[block++]->as<ResBlock>()->forward(h, emb);
      hs.push_back(h);
    }
    if (l + 1 < levels) {
      h = downsamplers[down++]->as<nn::Conv2d>()->forward(h);
      hs.push_back(h);
    }
  }
  h = mid2(mid1(h, emb), emb);
  block = 0;
  std::size_t up = 0;
  for (std::size_t l = levels; l-- > 0;) {
    for (int64_t b = 0; b < options_.res_blocks + 1; ++b) {
      auto s = hs.back();
      hs.pop_back();
      h = up_blocks[block++]->as<ResBlock>()->forward(torch::cat({h, s}, 1), emb);
    }
    if (l > 0) {
      const auto& target = hs.back();
      h = torch::upsample_nearest2d(h, std::vector<int64_t>{target.size(2), target.size(3)});
      h = upsamplers[up++]->as<nn::Conv2d>()->forward(h);
    }
  }
  return conv_out(torch::silu(norm_out(h)));
}

// ------------------------------------------------------------------ encoder

SemanticEncoderImpl::SemanticEncoderImpl(EncoderOptions options) : options_(std::move(options)) {
  const int64_t C = options_.base_channels;
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(options_.in_channels, C, 3).padding(1)));
  blocks = register_module("blocks", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  int64_t ch = C;
  for (std::size_t l = 0; l < options_.channel_mult.size(); ++l) {
    int64_t out = C * options_.channel_mult[l];
    blocks->push_back(ResBlock(ch, out, 0, options_.groups, options_.dropout));
    ch = out;
    if (l + 1 < options_.channel_mult.size())
      downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
  }
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(options_.groups, ch)));
  head = register_module("head", nn::Linear(ch, 2 * options_.z_dim));
}

Posterior SemanticEncoderImpl::forward(const torch::Tensor& x) {
  auto h = conv_in(x);
  for (std::size_t l = 0; l < blocks->size(); ++l) {
    h = blocks[l]->as<ResBlock>()->forward(h, {});
    if (l < downsamplers->size()) h = downsamplers[l]->as<nn::Conv2d>()->forward(h);
  }
  h = torch::silu(norm_out(h)).mean({2, 3});
  auto out = head(h);
  auto parts = out.chunk(2, 1);
  return {parts[0], parts[1]};
}

// ------------------------------------------------------------------ classifier

DigitClassifierImpl::DigitClassifierImpl() {
  fc1 = register_module("fc1", nn::Linear(28 * 28, 128));
  fc2 = register_module("fc2", nn::Linear(128, 64));
  fc3 = register_module("fc3", nn::Linear(64, 10));
}

torch::Tensor DigitClassifierImpl::features(const torch::Tensor& x) {
  auto h = torch::relu(fc1(x.flatten(1)));
  return torch::relu(fc2(h));
}

torch::Tensor DigitClassifierImpl::forward(const torch::Tensor& x) { return fc3(features(x)); }

// ------------------------------------------------------------------ parameter utilities

void copy_parameters(nn::Module& dst, const nn::Module& src) {
  torch::NoGradGuard ng;
  auto d = dst.named_parameters(true);
  auto s = src.named_parameters(true);
  for (const auto& item : s) d[item.key()].copy_(item.value());
  auto db = dst.named_buffers(true);
  for (const auto& item : src.named_buffers(true)) db[item.key()].copy_(item.value());
}

void ema_update(nn::Module& dst, const nn::Module& src, double decay) {
  torch::NoGradGuard ng;
  auto d = dst.named_parameters(true);
  for (const auto& item : src.named_parameters(true)) d[item.key()].mul_(decay).add_(item.value(), 1.0 - decay);
}

}  // namespace dscm::nets
