#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hvae/autodiff.hpp"
#include "hvae/rng.hpp"

namespace hvae {

// Ordered named parameter tensors. Insertion order is stable and
// checkpoint serialization depends on it.
class ParamStore {
 public:
  void add(std::string name, Tensor t);
  const Tensor& at(const std::string& name) const;
  void set(const std::string& name, Tensor t);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return items_.size(); }
  std::size_t total_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  // Copy with every tensor registered as a gradient leaf on `tape`.
  ParamStore watched(Tape& tape) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradients of a watched store, in parameter order. Missing entries
// come back as zeros.
std::vector<std::pair<std::string, Tensor>> grads_by_name(const ParamStore& watched,
                                                          const GradientMap& grads);

// Encoder/decoder architecture. Downsampling halves the resolution per
// level; widths.size() levels end in a bottleneck of
// (height / 2^levels) x (width / 2^levels). Self-attention sits at the
// `attn_tail` deepest resolutions, bottleneck included.
struct ModelConfig {
  int height = 32;
  int width = 32;
  int in_channels = 2;
  std::vector<int> widths = {16, 32, 64};
  int latent_dim = 32;
  int group_size = 8;
  int attn_tail = 2;
  int attn_dim_divisor = 8;

  static ModelConfig for_image(int height, int width, int latent_dim);
  void validate() const;
  int levels() const { return static_cast<int>(widths.size()); }
  int bottleneck_h() const { return height >> levels(); }
  int bottleneck_w() const { return width >> levels(); }
};

struct EncoderOutput {
  Tensor mu;
  Tensor logvar;
};

struct DecoderOutput {
  Tensor image_mean;
  Tensor mask_logits;
};

// ---- generic layers -------------------------------------------------

void init_conv(ParamStore& params, const std::string& prefix, int c_out, int c_in, int k, Rng& rng,
               bool zero_weights = false);
void init_linear(ParamStore& params, const std::string& prefix, int out, int in, Rng& rng);
void init_group_norm(ParamStore& params, const std::string& prefix, int channels);
void init_residual_block(ParamStore& params, const std::string& prefix, int channels,
                         int group_size, Rng& rng);
void init_self_attention(ParamStore& params, const std::string& prefix, int channels, int divisor,
                         Rng& rng);

Tensor conv_layer(const ParamStore& params, const std::string& prefix, const Tensor& input,
                  int stride, int padding);
Tensor linear_layer(const ParamStore& params, const std::string& prefix, const Tensor& input);
Tensor group_norm(const ParamStore& params, const std::string& prefix, const Tensor& input,
                  int group_size);

// out = input + conv(act(norm(conv(input)))); the closing conv starts
// at zero so the block is the identity at init.
Tensor residual_block_forward(const ParamStore& params, const std::string& prefix,
                              const Tensor& input, int group_size);

// out = input + gamma * Attn(input), gamma initialized to 0. Attn uses
// 1x1 q/k/v projections and row softmax over the H*W positions.
Tensor self_attention_forward(const ParamStore& params, const std::string& prefix,
                              const Tensor& input, int divisor);

// ---- assembled models -------------------------------------------------

// Parameters for encoder ("enc.*") and decoder ("dec.*") together.
ParamStore init_generative_params(const ModelConfig& config, Rng& rng);

EncoderOutput encoder_forward(const ModelConfig& config, const ParamStore& params,
                              const Tensor& x_and_m);
DecoderOutput decoder_forward(const ModelConfig& config, const ParamStore& params, const Tensor& z);

// z0 = mu + exp(logvar / 2) * noise
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& noise);

// ---- segmentation U-Net -------------------------------------------------

struct UnetConfig {
  int depth = 3;
  int base_width = 4;
  int group_size = 8;
  void validate(int height, int width) const;
};

ParamStore init_unet_params(const UnetConfig& config, Rng& rng);
Tensor unet_forward(const UnetConfig& config, const ParamStore& params, const Tensor& image);

}  // namespace hvae
