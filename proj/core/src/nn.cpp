#include "hvae/nn.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "hvae/errors.hpp"

namespace hvae {

void ParamStore::add(std::string name, Tensor t) {
  if (index_.count(name)) {
    throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), std::move(t));
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return items_[it->second].second;
}

void ParamStore::set(const std::string& name, Tensor t) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  if (!items_[it->second].second.same_shape(t)) {
    throw std::invalid_argument("parameter '" + name + "' shape change from " +
                                shape_str(items_[it->second].second.shape()) + " to " +
                                shape_str(t.shape()));
  }
  items_[it->second].second = std::move(t);
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

ParamStore ParamStore::watched(Tape& tape) const {
  ParamStore out;
  for (const auto& [name, t] : items_) out.add(name, tape.watch(t));
  return out;
}

std::vector<std::pair<std::string, Tensor>> grads_by_name(const ParamStore& watched,
                                                          const GradientMap& grads) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(watched.size());
  for (const auto& [name, t] : watched.items()) {
    if (grads.contains(t)) {
      out.emplace_back(name, grads.at(t));
    } else {
      out.emplace_back(name, Tensor::zeros(t.shape()));
    }
  }
  return out;
}

// ---- config ---------------------------------------------------------

ModelConfig ModelConfig::for_image(int height, int width, int latent_dim) {
  ModelConfig cfg;
  cfg.height = height;
  cfg.width = width;
  cfg.latent_dim = latent_dim;
  const int base = height >= 32 ? 16 : height >= 16 ? 8 : 4;
  cfg.widths.clear();
  int w = base;
  int res = std::min(height, width);
  while (res > 4) {
    cfg.widths.push_back(w);
    w *= 2;
    res /= 2;
  }
  if (cfg.widths.empty()) cfg.widths.push_back(base);
  cfg.validate();
  return cfg;
}

void ModelConfig::validate() const {
  if (widths.empty()) throw ConfigError("model config: widths must be non-empty");
  if (latent_dim < 1) throw ConfigError("model config: latent_dim must be positive");
  if (in_channels < 1) throw ConfigError("model config: in_channels must be positive");
  const int l = levels();
  if (height % (1 << l) != 0 || width % (1 << l) != 0) {
    throw ConfigError("model config: " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by 2^" + std::to_string(l));
  }
  if (bottleneck_h() < 1 || bottleneck_w() < 1) {
    throw ConfigError("model config: bottleneck collapses to zero extent");
  }
  for (int w : widths) {
    if (w < 1) throw ConfigError("model config: channel widths must be positive");
    if (w > group_size && w % group_size != 0) {
      throw ConfigError("model config: width " + std::to_string(w) +
                        " not divisible by group size " + std::to_string(group_size));
    }
    if (w > attn_dim_divisor && w % attn_dim_divisor != 0) {
      throw ConfigError("model config: width " + std::to_string(w) +
                        " not divisible by attention divisor " + std::to_string(attn_dim_divisor));
    }
  }
}

// ---- layer init ---------------------------------------------------------

namespace {

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

int groups_for(int channels, int group_size) {
  return channels > group_size ? channels / group_size : 1;
}

int attn_proj_dim(int channels, int divisor) {
  return channels > divisor ? channels / divisor : channels;
}

}  // namespace

void init_conv(ParamStore& params, const std::string& prefix, int c_out, int c_in, int k, Rng& rng,
               bool zero_weights) {
  const double bound = std::sqrt(1.0 / (static_cast<double>(c_in) * k * k));
  params.add(prefix + ".w", zero_weights ? Tensor::zeros({c_out, c_in, k, k})
                                         : uniform_init({c_out, c_in, k, k}, bound, rng));
  params.add(prefix + ".b", Tensor::zeros({c_out}));
}

void init_linear(ParamStore& params, const std::string& prefix, int out, int in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  params.add(prefix + ".w", uniform_init({out, in}, bound, rng));
  params.add(prefix + ".b", Tensor::zeros({out}));
}

void init_group_norm(ParamStore& params, const std::string& prefix, int channels) {
  params.add(prefix + ".scale", Tensor::full({channels}, 1.0));
  params.add(prefix + ".shift", Tensor::zeros({channels}));
}

void init_residual_block(ParamStore& params, const std::string& prefix, int channels,
                         int group_size, Rng& rng) {
  (void)group_size;
  init_conv(params, prefix + ".conv1", channels, channels, 3, rng);
  init_group_norm(params, prefix + ".gn", channels);
  init_conv(params, prefix + ".conv2", channels, channels, 3, rng, /*zero_weights=*/true);
}

void init_self_attention(ParamStore& params, const std::string& prefix, int channels, int divisor,
                         Rng& rng) {
  const int dk = attn_proj_dim(channels, divisor);
  const double bound = std::sqrt(1.0 / static_cast<double>(channels));
  params.add(prefix + ".q", uniform_init({dk, channels}, bound, rng));
  params.add(prefix + ".k", uniform_init({dk, channels}, bound, rng));
  params.add(prefix + ".v", uniform_init({channels, channels}, bound, rng));
  params.add(prefix + ".gamma", Tensor::zeros(Shape{}));
}

// ---- layer forward ---------------------------------------------------------

Tensor conv_layer(const ParamStore& params, const std::string& prefix, const Tensor& input,
                  int stride, int padding) {
  Tensor out = conv2d(input, params.at(prefix + ".w"), stride, padding);
  Tensor bias = broadcast_axes(params.at(prefix + ".b"), {1, 2}, out.shape());
  return add(out, bias);
}

Tensor linear_layer(const ParamStore& params, const std::string& prefix, const Tensor& input) {
  const Tensor& w = params.at(prefix + ".w");
  Tensor col = reshape(input, {w.shape()[1], 1});
  Tensor out = reshape(matmul(w, col), {w.shape()[0]});
  return add(out, params.at(prefix + ".b"));
}

Tensor group_norm(const ParamStore& params, const std::string& prefix, const Tensor& input,
                  int group_size) {
  const int c = input.shape()[0];
  const int g = groups_for(c, group_size);
  const int per_group = static_cast<int>(input.numel()) / g;
  Tensor xg = reshape(input, {g, per_group});
  Tensor mean = broadcast_axes(reduce_mean(xg, {1}), {1}, xg.shape());
  Tensor centered = sub(xg, mean);
  Tensor var = broadcast_axes(reduce_mean(mul(centered, centered), {1}), {1}, xg.shape());
  Tensor norm = div(centered, pow(add(var, 1e-5), 0.5));
  Tensor back = reshape(norm, input.shape());
  Tensor scale = broadcast_axes(params.at(prefix + ".scale"), {1, 2}, input.shape());
  Tensor shift = broadcast_axes(params.at(prefix + ".shift"), {1, 2}, input.shape());
  return add(mul(back, scale), shift);
}

Tensor residual_block_forward(const ParamStore& params, const std::string& prefix,
                              const Tensor& input, int group_size) {
  Tensor h = conv_layer(params, prefix + ".conv1", input, 1, 1);
  h = group_norm(params, prefix + ".gn", h, group_size);
  h = relu(h);
  h = conv_layer(params, prefix + ".conv2", h, 1, 1);
  return add(input, h);
}

Tensor self_attention_forward(const ParamStore& params, const std::string& prefix,
                              const Tensor& input, int divisor) {
  const int c = input.shape()[0];
  const int hw = input.shape()[1] * input.shape()[2];
  const int dk = attn_proj_dim(c, divisor);
  Tensor x2 = reshape(input, {c, hw});
  Tensor q = matmul(params.at(prefix + ".q"), x2);
  Tensor k = matmul(params.at(prefix + ".k"), x2);
  Tensor v = matmul(params.at(prefix + ".v"), x2);
  Tensor scores = mul(matmul(transpose(q), k), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor attn = softmax(scores, 1);
  Tensor mixed = matmul(v, transpose(attn));
  Tensor spatial = reshape(mixed, input.shape());
  Tensor gamma = broadcast_axes(params.at(prefix + ".gamma"), {0, 1, 2}, input.shape());
  return add(input, mul(spatial, gamma));
}

// ---- encoder / decoder ------------------------------------------------------

namespace {

// Resolutions (square side of the bottleneck-scaled grid) that carry
// attention: the attn_tail deepest ones, bottleneck included.
std::set<int> attention_resolutions(const ModelConfig& cfg) {
  std::set<int> res;
  const int l = cfg.levels();
  for (int lvl = std::max(0, l - cfg.attn_tail); lvl < l; ++lvl) {
    res.insert(cfg.height >> (lvl + 1));
  }
  return res;
}

}  // namespace

ParamStore init_generative_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore params;
  const int l = cfg.levels();
  const auto attn_res = attention_resolutions(cfg);

  int c_in = cfg.in_channels;
  for (int lvl = 0; lvl < l; ++lvl) {
    const int c_out = cfg.widths[static_cast<std::size_t>(lvl)];
    init_conv(params, "enc.down" + std::to_string(lvl), c_out, c_in, 4, rng);
    init_residual_block(params, "enc.res" + std::to_string(lvl), c_out, cfg.group_size, rng);
    if (attn_res.count(cfg.height >> (lvl + 1))) {
      init_self_attention(params, "enc.attn" + std::to_string(lvl), c_out, cfg.attn_dim_divisor,
                          rng);
    }
    c_in = c_out;
  }
  const int c_bot = cfg.widths.back();
  const int flat = c_bot * cfg.bottleneck_h() * cfg.bottleneck_w();
  init_linear(params, "enc.mu", cfg.latent_dim, flat, rng);
  init_linear(params, "enc.logvar", cfg.latent_dim, flat, rng);

  init_linear(params, "dec.fc", flat, cfg.latent_dim, rng);
  init_residual_block(params, "dec.res_bot", c_bot, cfg.group_size, rng);
  init_self_attention(params, "dec.attn_bot", c_bot, cfg.attn_dim_divisor, rng);
  int cur = c_bot;
  for (int stage = 0; stage < l; ++stage) {
    const int next = cfg.widths[static_cast<std::size_t>(std::max(0, l - 2 - stage))];
    init_conv(params, "dec.up" + std::to_string(stage), next, cur, 3, rng);
    init_group_norm(params, "dec.upgn" + std::to_string(stage), next);
    init_residual_block(params, "dec.res" + std::to_string(stage), next, cfg.group_size, rng);
    if (attn_res.count(cfg.bottleneck_h() << (stage + 1))) {
      init_self_attention(params, "dec.attn" + std::to_string(stage), next, cfg.attn_dim_divisor,
                          rng);
    }
    cur = next;
  }
  init_conv(params, "dec.head_img", 1, cur, 3, rng);
  init_conv(params, "dec.head_mask", 1, cur, 3, rng);
  return params;
}

EncoderOutput encoder_forward(const ModelConfig& cfg, const ParamStore& params,
                              const Tensor& x_and_m) {
  const Shape expected{cfg.in_channels, cfg.height, cfg.width};
  if (x_and_m.shape() != expected) {
    throw std::invalid_argument("encoder input shape " + shape_str(x_and_m.shape()) +
                                " does not match configured " + shape_str(expected));
  }
  if (strict_finite_enabled() && cfg.in_channels == 2) {
    const std::size_t plane = static_cast<std::size_t>(cfg.height) * cfg.width;
    for (std::size_t i = plane; i < 2 * plane; ++i) {
      const double v = x_and_m.at(i);
      if (v != 0.0 && v != 1.0) {
        throw DataError("encoder mask channel contains non-binary value " + std::to_string(v));
      }
    }
  }

  const int l = cfg.levels();
  const auto attn_res = attention_resolutions(cfg);
  Tensor cur = x_and_m;
  for (int lvl = 0; lvl < l; ++lvl) {
    cur = conv_layer(params, "enc.down" + std::to_string(lvl), cur, 2, 1);
    cur = leaky_relu(cur, 0.2);
    cur = residual_block_forward(params, "enc.res" + std::to_string(lvl), cur, cfg.group_size);
    if (attn_res.count(cfg.height >> (lvl + 1))) {
      cur = self_attention_forward(params, "enc.attn" + std::to_string(lvl), cur,
                                   cfg.attn_dim_divisor);
    }
  }
  Tensor flat = reshape(cur, {static_cast<int>(cur.numel())});
  EncoderOutput out;
  out.mu = linear_layer(params, "enc.mu", flat);
  out.logvar = linear_layer(params, "enc.logvar", flat);
  return out;
}

DecoderOutput decoder_forward(const ModelConfig& cfg, const ParamStore& params, const Tensor& z) {
  if (z.shape() != Shape{cfg.latent_dim}) {
    throw std::invalid_argument("decoder latent shape " + shape_str(z.shape()) +
                                " does not match configured dim " + std::to_string(cfg.latent_dim));
  }
  const int l = cfg.levels();
  const int c_bot = cfg.widths.back();
  const auto attn_res = attention_resolutions(cfg);

  Tensor h = linear_layer(params, "dec.fc", z);
  Tensor cur = reshape(h, {c_bot, cfg.bottleneck_h(), cfg.bottleneck_w()});
  cur = residual_block_forward(params, "dec.res_bot", cur, cfg.group_size);
  cur = self_attention_forward(params, "dec.attn_bot", cur, cfg.attn_dim_divisor);
  for (int stage = 0; stage < l; ++stage) {
    cur = upsample_nearest2(cur);
    cur = conv_layer(params, "dec.up" + std::to_string(stage), cur, 1, 1);
    cur = group_norm(params, "dec.upgn" + std::to_string(stage), cur, cfg.group_size);
    cur = relu(cur);
    cur = residual_block_forward(params, "dec.res" + std::to_string(stage), cur, cfg.group_size);
    if (attn_res.count(cfg.bottleneck_h() << (stage + 1))) {
      cur = self_attention_forward(params, "dec.attn" + std::to_string(stage), cur,
                                   cfg.attn_dim_divisor);
    }
  }
  DecoderOutput out;
  out.image_mean = conv_layer(params, "dec.head_img", cur, 1, 1);
  out.mask_logits = conv_layer(params, "dec.head_mask", cur, 1, 1);
  return out;
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& noise) {
  if (!mu.same_shape(logvar) || !mu.same_shape(noise)) {
    throw std::invalid_argument("reparameterize: shapes " + shape_str(mu.shape()) + ", " +
                                shape_str(logvar.shape()) + ", " + shape_str(noise.shape()) +
                                " must agree");
  }
  return add(mu, mul(exp(mul(logvar, 0.5)), noise));
}

// ---- U-Net -------------------------------------------------------------

void UnetConfig::validate(int height, int width) const {
  if (depth < 1) throw ConfigError("unet config: depth must be positive");
  if (base_width < 1) throw ConfigError("unet config: base width must be positive");
  if (height % (1 << depth) != 0 || width % (1 << depth) != 0) {
    throw ConfigError("unet config: " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by 2^" + std::to_string(depth));
  }
}

namespace {

void init_double_conv(ParamStore& params, const std::string& prefix, int c_out, int c_in,
                      Rng& rng) {
  init_conv(params, prefix + ".c1", c_out, c_in, 3, rng);
  init_group_norm(params, prefix + ".n1", c_out);
  init_conv(params, prefix + ".c2", c_out, c_out, 3, rng);
  init_group_norm(params, prefix + ".n2", c_out);
}

Tensor double_conv(const ParamStore& params, const std::string& prefix, const Tensor& x,
                   int group_size) {
  Tensor h = conv_layer(params, prefix + ".c1", x, 1, 1);
  h = relu(group_norm(params, prefix + ".n1", h, group_size));
  h = conv_layer(params, prefix + ".c2", h, 1, 1);
  return relu(group_norm(params, prefix + ".n2", h, group_size));
}

}  // namespace

ParamStore init_unet_params(const UnetConfig& cfg, Rng& rng) {
  ParamStore params;
  int c_in = 1;
  for (int d = 0; d < cfg.depth; ++d) {
    const int w = cfg.base_width << d;
    init_double_conv(params, "unet.enc" + std::to_string(d), w, c_in, rng);
    init_conv(params, "unet.down" + std::to_string(d), w, w, 4, rng);
    c_in = w;
  }
  init_double_conv(params, "unet.bot", cfg.base_width << cfg.depth, c_in, rng);
  int cur = cfg.base_width << cfg.depth;
  for (int d = cfg.depth - 1; d >= 0; --d) {
    const int w = cfg.base_width << d;
    init_conv(params, "unet.up" + std::to_string(d), w, cur, 3, rng);
    init_double_conv(params, "unet.dec" + std::to_string(d), w, 2 * w, rng);
    cur = w;
  }
  init_conv(params, "unet.head", 1, cfg.base_width, 1, rng);
  return params;
}

Tensor unet_forward(const UnetConfig& cfg, const ParamStore& params, const Tensor& image) {
  if (image.rank() != 3 || image.shape()[0] != 1) {
    throw std::invalid_argument("unet input must be [1,H,W], got " + shape_str(image.shape()));
  }
  cfg.validate(image.shape()[1], image.shape()[2]);

  std::vector<Tensor> skips;
  Tensor cur = image;
  for (int d = 0; d < cfg.depth; ++d) {
    cur = double_conv(params, "unet.enc" + std::to_string(d), cur, cfg.group_size);
    skips.push_back(cur);
    cur = conv_layer(params, "unet.down" + std::to_string(d), cur, 2, 1);
  }
  cur = double_conv(params, "unet.bot", cur, cfg.group_size);
  for (int d = cfg.depth - 1; d >= 0; --d) {
    cur = upsample_nearest2(cur);
    cur = conv_layer(params, "unet.up" + std::to_string(d), cur, 1, 1);
    cur = concat_channels(skips[static_cast<std::size_t>(d)], cur);
    cur = double_conv(params, "unet.dec" + std::to_string(d), cur, cfg.group_size);
  }
  return conv_layer(params, "unet.head", cur, 1, 0);
}

}  // namespace hvae
