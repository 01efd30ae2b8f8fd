#include "acal/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "acal/rng.hpp"
#include "nets_io.hpp"

namespace acal {

std::string role_str(Role role) {
  switch (role) {
    case Role::generator: return "generator";
    case Role::discriminator: return "discriminator";
    case Role::classifier: return "classifier";
  }
  return "?";
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

Network Network::detached() const {
  Network out = *this;
  for (auto& [name, t] : out.params) t = t.detach();
  return out;
}

Network Network::with_params(std::map<std::string, Tensor> new_params) const {
  if (new_params.size() != params.size()) {
    throw ContractError("with_params: expected " + std::to_string(params.size()) +
                        " parameters, got " + std::to_string(new_params.size()));
  }
  for (const auto& [name, t] : new_params) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("with_params: unknown parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw ContractError("with_params: shape mismatch for " + name);
    }
  }
  Network out = *this;
  out.params = std::move(new_params);
  return out;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

std::string wname(std::size_t layer) { return "L" + std::to_string(layer) + ".w"; }
std::string bname(std::size_t layer) { return "L" + std::to_string(layer) + ".b"; }

std::vector<double> init_values(std::size_t count, std::size_t fan_in,
                                const InitSpec& init, std::uint64_t stream_tag) {
  rng::Stream s(rng::derive(init.seed, "param-init", stream_tag));
  std::vector<double> v(count);
  if (init.scheme == InitSpec::Scheme::uniform_fan_in) {
    const double limit = init.gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    for (double& x : v) x = s.uniform(-limit, limit);
  } else {
    const double sigma = init.gain / std::sqrt(static_cast<double>(fan_in));
    for (double& x : v) x = sigma * s.normal();
  }
  return v;
}

void add_conv(Network& net, int in_ch, int out_ch, int kernel, int stride, int pad,
              const InitSpec& init) {
  const std::size_t i = net.layers.size();
  net.layers.push_back({LayerKind::conv, in_ch, out_ch, kernel, stride, pad, 0.0});
  const std::size_t fan_in = static_cast<std::size_t>(in_ch) * kernel * kernel;
  const std::size_t count = static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel;
  net.params[wname(i)] = Tensor::param(
      {static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
       static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)},
      init_values(count, fan_in, init, i * 2));
  net.params[bname(i)] = Tensor::param({static_cast<std::size_t>(out_ch)},
                                       std::vector<double>(out_ch, 0.0));
}

void add_dense(Network& net, int in_dim, int out_dim, const InitSpec& init) {
  const std::size_t i = net.layers.size();
  net.layers.push_back({LayerKind::dense, in_dim, out_dim, 0, 0, 0, 0.0});
  net.params[wname(i)] = Tensor::param(
      {static_cast<std::size_t>(in_dim), static_cast<std::size_t>(out_dim)},
      init_values(static_cast<std::size_t>(in_dim) * out_dim, in_dim, init, i * 2));
  net.params[bname(i)] = Tensor::param({static_cast<std::size_t>(out_dim)},
                                       std::vector<double>(out_dim, 0.0));
}

void add_plain(Network& net, LayerKind kind, int a = 0, double rate = 0.0) {
  net.layers.push_back({kind, a, 0, 0, 0, 0, rate});
}

void check_image_shape(const Shape& image_shape) {
  if (image_shape.size() != 3) {
    throw ShapeError("image shape must be [C,H,W], got " + shape_str(image_shape));
  }
}

}  // namespace

Network build_classifier(const Shape& image_shape, int num_classes, const InitSpec& init) {
  check_image_shape(image_shape);
  if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
  const std::size_t C = image_shape[0];
  std::size_t h = image_shape[1], w = image_shape[2];

  Network net;
  net.role = Role::classifier;
  net.input_shape = image_shape;

  auto after_conv5 = [](std::size_t e) -> std::size_t { return e >= 5 ? e - 4 : 0; };
  const std::size_t h1 = after_conv5(h), w1 = after_conv5(w);
  const std::size_t h2 = h1 / 2, w2 = w1 / 2;
  const std::size_t h3 = after_conv5(h2), w3 = after_conv5(w2);
  const std::size_t h4 = h3 / 2, w4 = w3 / 2;
  if (h1 == 0 || w1 == 0 || h2 == 0 || w2 == 0 || h3 == 0 || w3 == 0 || h4 == 0 || w4 == 0) {
    throw ShapeError("classifier input " + shape_str(image_shape) +
                     " too small for two conv+pool stages");
  }

  add_conv(net, static_cast<int>(C), 20, 5, 1, 0, init);
  add_plain(net, LayerKind::relu);
  add_plain(net, LayerKind::maxpool, 2);
  add_conv(net, 20, 50, 5, 1, 0, init);
  add_plain(net, LayerKind::relu);
  add_plain(net, LayerKind::maxpool, 2);
  add_plain(net, LayerKind::dropout, 0, 0.5);
  add_plain(net, LayerKind::flatten);
  add_dense(net, static_cast<int>(50 * h4 * w4), 50, init);
  add_plain(net, LayerKind::relu);
  add_dense(net, 50, num_classes, init);
  return net;
}

Network build_generator(const Shape& image_shape, const InitSpec& init) {
  check_image_shape(image_shape);
  const std::size_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  if (H != W) {
    throw ShapeError("generator input must be square, got " + shape_str(image_shape));
  }
  if (H % 4 != 0 || H == 0) {
    throw ShapeError("generator spatial extents must be divisible by 4, got " +
                     shape_str(image_shape));
  }
  Network net;
  net.role = Role::generator;
  net.input_shape = image_shape;
  add_conv(net, static_cast<int>(C), 8, 3, 2, 1, init);
  add_plain(net, LayerKind::relu);
  add_conv(net, 8, 16, 3, 2, 1, init);
  add_plain(net, LayerKind::relu);
  add_conv(net, 16, 16, 3, 1, 1, init);
  add_plain(net, LayerKind::relu);
  add_plain(net, LayerKind::upsample, 2);
  add_conv(net, 16, 8, 3, 1, 1, init);
  add_plain(net, LayerKind::relu);
  add_plain(net, LayerKind::upsample, 2);
  add_conv(net, 8, static_cast<int>(C), 3, 1, 1, init);
  add_plain(net, LayerKind::tanh);
  return net;
}

Network build_discriminator(const Shape& image_shape, const InitSpec& init) {
  check_image_shape(image_shape);
  const std::size_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  if (H != W) {
    throw ShapeError("discriminator input must be square, got " + shape_str(image_shape));
  }
  if (H % 4 != 0 || H == 0) {
    throw ShapeError("discriminator spatial extents must be divisible by 4, got " +
                     shape_str(image_shape));
  }
  Network net;
  net.role = Role::discriminator;
  net.input_shape = image_shape;
  add_conv(net, static_cast<int>(C), 8, 3, 2, 1, init);
  add_plain(net, LayerKind::relu);
  add_conv(net, 8, 16, 3, 2, 1, init);
  add_plain(net, LayerKind::relu);
  add_plain(net, LayerKind::flatten);
  add_dense(net, static_cast<int>(16 * (H / 4) * (W / 4)), 1, init);
  add_plain(net, LayerKind::sigmoid);
  return net;
}

Network identity_generator(const Shape& image_shape) {
  check_image_shape(image_shape);
  Network net;
  net.role = Role::generator;
  net.input_shape = image_shape;
  add_plain(net, LayerKind::identity);
  return net;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

// Sigmoid saturates to exactly 0/1 in doubles for |z| > ~37; this guard
// keeps discriminator outputs strictly inside (0,1).
constexpr double kProbGuard = 1e-12;

Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
  rng::Stream s(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> m(shape_size(shape));
  for (double& v : m) v = s.uniform() >= rate ? keep_scale : 0.0;
  return Tensor::from(shape, std::move(m));
}

}  // namespace

Tensor forward(const Network& net, const Tensor& batch, const ForwardCtx& ctx) {
  if (batch.rank() != 4) {
    throw ShapeError("forward: batch must be [B,C,H,W], got " + shape_str(batch.shape()));
  }
  const std::size_t B = batch.shape()[0];
  if (Shape(batch.shape().begin() + 1, batch.shape().end()) != net.input_shape) {
    throw ShapeError("forward: batch item shape " + shape_str(batch.shape()) +
                     " does not match network input " + shape_str(net.input_shape));
  }
  Tensor x = batch;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerDesc& l = net.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
        x = conv2d(x, net.params.at(wname(i)), static_cast<std::size_t>(l.d),
                   static_cast<std::size_t>(l.e));
        x = bias_add_channels(x, net.params.at(bname(i)));
        break;
      case LayerKind::dense: {
        const Tensor& w = net.params.at(wname(i));
        x = add(matmul(x, w), tile(net.params.at(bname(i)), B));
        break;
      }
      case LayerKind::relu:
        x = relu(x);
        break;
      case LayerKind::tanh:
        x = tanh(x);
        break;
      case LayerKind::sigmoid:
        x = sigmoid(x);
        break;
      case LayerKind::maxpool:
        x = max_pool2d(x, static_cast<std::size_t>(l.a));
        break;
      case LayerKind::dropout:
        if (ctx.train && l.rate > 0.0) {
          x = mul(x, dropout_mask(x.shape(), l.rate,
                                  rng::derive(ctx.dropout_seed, "dropout-layer", i)));
        }
        break;
      case LayerKind::flatten:
        x = reshape(x, {B, x.size() / B});
        break;
      case LayerKind::upsample:
        x = upsample_nearest(x, static_cast<std::size_t>(l.a));
        break;
      case LayerKind::identity:
        break;
    }
  }
  if (net.role == Role::discriminator) {
    x = clamp(reshape(x, {B}), kProbGuard, 1.0 - kProbGuard);
  }
  return x;
}

Tensor forward_nograd(const Network& net, const Tensor& batch, const ForwardCtx& ctx) {
  return forward(net.detached(), batch.detach(), ctx);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'C', 'K', 'P'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

namespace net_io {

void write_network(binio::ByteWriter& w, const Network& net) {
  w.u8(static_cast<std::uint8_t>(net.role));
  w.u8(static_cast<std::uint8_t>(net.input_shape.size()));
  for (std::size_t e : net.input_shape) w.u32(static_cast<std::uint32_t>(e));
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const LayerDesc& l : net.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.i32(l.a);
    w.i32(l.b);
    w.i32(l.c);
    w.i32(l.d);
    w.i32(l.e);
    w.f64(l.rate);
  }
  w.u32(static_cast<std::uint32_t>(net.params.size()));
  for (const auto& [name, t] : net.params) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.values()) w.f64(v);
  }
}

Network read_network(binio::ByteReader& r) {
  const std::size_t role_off = r.pos;
  const std::uint8_t role_byte = r.u8();
  if (role_byte > 2) throw ParseError("invalid role byte", role_off);

  Network net;
  net.role = static_cast<Role>(role_byte);
  const std::uint8_t in_rank = r.u8();
  if (in_rank != 3) throw ParseError("input shape must be rank 3", r.pos - 1);
  for (int i = 0; i < in_rank; ++i) net.input_shape.push_back(r.u32());

  const std::uint32_t layer_count = r.u32();
  if (layer_count > 1024) throw ParseError("implausible layer count", r.pos - 4);
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const std::size_t kind_off = r.pos;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::identity)) {
      throw ParseError("invalid layer kind", kind_off);
    }
    LayerDesc l;
    l.kind = static_cast<LayerKind>(kind);
    l.a = r.i32();
    l.b = r.i32();
    l.c = r.i32();
    l.d = r.i32();
    l.e = r.i32();
    l.rate = r.f64();
    net.layers.push_back(l);
  }

  const std::uint32_t param_count = r.u32();
  if (param_count > 4096) throw ParseError("implausible parameter count", r.pos - 4);
  for (std::uint32_t i = 0; i < param_count; ++i) {
    const std::string name = r.str();
    const std::uint8_t rank = r.u8();
    if (rank > 8) throw ParseError("implausible tensor rank", r.pos - 1);
    Shape shape;
    std::size_t count = 1;
    for (int k = 0; k < rank; ++k) {
      const std::size_t ext_off = r.pos;
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 24)) throw ParseError("implausible extent", ext_off);
      shape.push_back(e);
      count *= e;
    }
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) values[k] = r.f64();
    net.params[name] = Tensor::param(std::move(shape), std::move(values));
  }
  return net;
}

}  // namespace net_io

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  binio::ByteWriter w;
  w.raw(kMagic, 4);
  w.u8(kVersion);
  net_io::write_network(w, net);
  w.u64(rng::fnv1a64(w.bytes.data(), w.bytes.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path, std::optional<Role> expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 13) throw ParseError("file too short for a checkpoint", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("bad magic", 0);

  const std::uint64_t stored_sum = [&] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
    return v;
  }();
  const std::uint64_t computed_sum = rng::fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored_sum != computed_sum) {
    throw ParseError("checksum mismatch", bytes.size() - 8);
  }

  binio::ByteReader r{bytes, 4};
  const std::uint8_t version = r.u8();
  if (version != kVersion) throw ParseError("unsupported version", 4);
  Network net = net_io::read_network(r);
  if (r.pos != bytes.size() - 8) throw ParseError("trailing bytes", r.pos);

  if (expect && net.role != *expect) {
    throw ContractError("checkpoint holds a " + role_str(net.role) + ", expected a " +
                        role_str(*expect));
  }
  return net;
}

}  // namespace acal
