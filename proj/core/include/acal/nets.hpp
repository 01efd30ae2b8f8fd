#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acal/tensor.hpp"

namespace acal {

enum class Role : std::uint8_t { generator = 0, discriminator = 1, classifier = 2 };

std::string role_str(Role role);

enum class LayerKind : std::uint8_t {
  conv = 0,      // a=in_ch b=out_ch c=kernel d=stride e=pad
  dense = 1,     // a=in_dim b=out_dim
  relu = 2,
  tanh = 3,
  sigmoid = 4,
  maxpool = 5,   // a=window
  dropout = 6,   // rate
  flatten = 7,
  upsample = 8,  // a=factor
  identity = 9,
};

struct LayerDesc {
  LayerKind kind{};
  std::int32_t a = 0, b = 0, c = 0, d = 0, e = 0;
  double rate = 0.0;
};

struct InitSpec {
  enum class Scheme : std::uint8_t { uniform_fan_in = 0, normal_scaled = 1 };
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::uniform_fan_in;
  double gain = 1.0;
};

// A parameterised differentiable function. Immutable value object: a
// training step replaces the parameter map wholesale rather than mutating
// tensors in place.
struct Network {
  Role role{};
  Shape input_shape;  // [C,H,W]
  std::vector<LayerDesc> layers;
  std::map<std::string, Tensor> params;  // differentiable leaves

  std::size_t param_count() const;
  // Copy whose parameters are plain constants; forwards through it build no
  // graph and incur no backward cost.
  Network detached() const;
  // Copy with a replacement parameter map (names and shapes must match).
  Network with_params(std::map<std::string, Tensor> params) const;
};

struct ForwardCtx {
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

// Role-specific forward pass over a batch [B,C,H,W]:
//   classifier    -> logits [B,K]
//   generator     -> images [B,C,H,W] in (-1,1)
//   discriminator -> probabilities [B] in (0,1)
// Dropout is active only in train mode and fully determined by
// ctx.dropout_seed.
Tensor forward(const Network& net, const Tensor& batch, const ForwardCtx& ctx = {});

// Forward with no graph construction (evaluation/frozen-net paths).
Tensor forward_nograd(const Network& net, const Tensor& batch, const ForwardCtx& ctx = {});

// Two 5x5 convolutions (20, 50 channels) each followed by relu and 2x2
// max-pool, then dropout and dense layers of width 50 and num_classes.
Network build_classifier(const Shape& image_shape, int num_classes, const InitSpec& init);

// Two stride-2 convolutions down, one bottleneck convolution, two
// nearest-neighbour-upsample+convolution stages back up, tanh output.
// Requires square spatial extents divisible by 4; output shape equals the
// input shape.
Network build_generator(const Shape& image_shape, const InitSpec& init);

// Stride-2 convolution stack into a dense layer and sigmoid, one
// probability per example.
Network build_discriminator(const Shape& image_shape, const InitSpec& init);

// Pass-through generator used as a fixture in loss-identity checks.
Network identity_generator(const Shape& image_shape);

// Little-endian binary checkpoint, bit-exact round trip. Layout (all
// integers little-endian):
//   "ACKP"            4-byte magic
//   u8                format version (1)
//   u8                role
//   u8                rank of input shape, then rank x u32 extents
//   u32               layer count
//   per layer:        u8 kind, 5 x i32 (a..e), f64 rate
//   u32               parameter count
//   per parameter:    u16 name length, name bytes, u8 rank,
//                     rank x u32 extents, count x f64 values
//   u64               FNV-1a of all preceding bytes
void save_checkpoint(const Network& net, const std::filesystem::path& path);

// Throws ParseError (with byte offset) on malformed input and ContractError
// when `expect` is given and the stored role differs.
Network load_checkpoint(const std::filesystem::path& path,
                        std::optional<Role> expect = std::nullopt);

}  // namespace acal
