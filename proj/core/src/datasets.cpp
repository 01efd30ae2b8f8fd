#include "acal/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "acal/rng.hpp"

namespace acal {

std::string split_str(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::span<const double> DomainDataset::image(std::size_t i) const {
  if (i >= size()) throw IndexError("dataset image index out of range");
  const std::size_t n = image_elems();
  return {pixels.data() + i * n, n};
}

std::size_t DomainDataset::labeled_count() const {
  std::size_t n = 0;
  for (const auto& l : labels) n += l.has_value() ? 1 : 0;
  return n;
}

bool Batch::fully_labeled() const {
  for (const auto& l : labels) {
    if (!l) return false;
  }
  return true;
}

std::vector<int> Batch::labels_or_throw(const std::string& context) const {
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    if (!l) throw ConfigError(context + ": batch contains unlabeled items");
    out.push_back(*l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Glyph rendering
// ---------------------------------------------------------------------------

namespace {

// 5x7 digit stencils, one 5-bit row value per line, MSB = leftmost column.
constexpr std::array<std::array<std::uint8_t, 7>, 10> kDigitStencils = {{
    {14, 17, 19, 21, 25, 17, 14},  // 0
    {4, 12, 4, 4, 4, 4, 14},       // 1
    {14, 17, 1, 2, 4, 8, 31},      // 2
    {31, 2, 4, 2, 1, 17, 14},      // 3
    {2, 6, 10, 18, 31, 2, 2},      // 4
    {31, 16, 30, 1, 1, 17, 14},    // 5
    {6, 8, 16, 30, 17, 17, 14},    // 6
    {31, 1, 2, 4, 8, 8, 8},        // 7
    {14, 17, 17, 14, 17, 17, 14},  // 8
    {14, 17, 17, 15, 1, 2, 12},    // 9
}};

bool stencil_bit(int digit, long row, long col) {
  if (row < 0 || row >= 7 || col < 0 || col >= 5) return false;
  return (kDigitStencils[static_cast<std::size_t>(digit)][static_cast<std::size_t>(row)] >>
          (4 - col)) & 1;
}

void render_glyph(int digit, const GlyphStyle& style, rng::Stream& geo,
                  rng::Stream& noise, double* out) {
  const int S = style.canvas;
  const int k = std::max(1, (S - 2) / 7);  // stencil upscale factor
  const int gw = 5 * k, gh = 7 * k;
  const long ox = (S - gw) / 2, oy = (S - gh) / 2;

  const double dx = geo.uniform(-style.max_shift, style.max_shift);
  const double dy = geo.uniform(-style.max_shift, style.max_shift);
  const double theta = geo.uniform(-style.max_rotate, style.max_rotate);
  const double c = (S - 1) / 2.0;
  const double cosv = std::cos(-theta), sinv = std::sin(-theta);

  std::vector<std::uint8_t> mask(static_cast<std::size_t>(S) * S, 0);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double ux = x - c - dx, uy = y - c - dy;
      const double sx = cosv * ux - sinv * uy + c;
      const double sy = sinv * ux + cosv * uy + c;
      const long gx = std::lround(sx) - ox;
      const long gy = std::lround(sy) - oy;
      if (gx >= 0 && gx < gw && gy >= 0 && gy < gh &&
          stencil_bit(digit, gy / k, gx / k)) {
        mask[static_cast<std::size_t>(y) * S + x] = 1;
      }
    }
  }

  if (style.stroke_dilate > 0) {
    std::vector<std::uint8_t> dilated = mask;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        if (mask[static_cast<std::size_t>(y) * S + x]) continue;
        bool hit = false;
        for (int ddy = -1; ddy <= 1 && !hit; ++ddy)
          for (int ddx = -1; ddx <= 1 && !hit; ++ddx) {
            const int ny = y + ddy, nx = x + ddx;
            if (ny >= 0 && ny < S && nx >= 0 && nx < S &&
                mask[static_cast<std::size_t>(ny) * S + nx]) {
              hit = true;
            }
          }
        if (hit) dilated[static_cast<std::size_t>(y) * S + x] = 1;
      }
    mask.swap(dilated);
  }

  for (int i = 0; i < S * S; ++i) {
    double v = mask[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    if (style.invert) v = -v;
    v += style.background_level;
    if (style.noise_sigma > 0.0) v += style.noise_sigma * noise.normal();
    out[i] = std::clamp(v, -1.0, 1.0);
  }
}

}  // namespace

DomainDataset gen_glyph_domain(const GlyphStyle& style, int n_per_class,
                               std::uint64_t seed, Split split,
                               std::string domain_id) {
  if (n_per_class < 1) throw ConfigError("gen_glyph_domain: n_per_class must be >= 1");
  if (style.canvas < 9) throw ConfigError("gen_glyph_domain: canvas too small");
  const int S = style.canvas;
  DomainDataset ds;
  ds.domain_id = std::move(domain_id);
  ds.image_shape = {1, static_cast<std::size_t>(S), static_cast<std::size_t>(S)};
  ds.class_count = 10;
  ds.split = split;
  const std::size_t elems = ds.image_elems();
  ds.pixels.resize(static_cast<std::size_t>(n_per_class) * 10 * elems);
  const std::uint64_t split_tag = static_cast<std::uint64_t>(split);
  std::size_t img = 0;
  for (int c = 0; c < 10; ++c) {
    for (int i = 0; i < n_per_class; ++i, ++img) {
      const std::uint64_t idx = static_cast<std::uint64_t>(c) * 1000003u +
                                static_cast<std::uint64_t>(i);
      rng::Stream geo(rng::derive(seed, "glyph-geo", split_tag, idx));
      rng::Stream noise(rng::derive(seed, "glyph-noise", split_tag, idx));
      render_glyph(c, style, geo, noise, ds.pixels.data() + img * elems);
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                   const char* what) {
  if (off + 4 > b.size()) {
    throw ParseError(std::string("truncated ") + what, b.size());
  }
  return (static_cast<std::uint32_t>(b[off]) << 24) |
         (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) |
         static_cast<std::uint32_t>(b[off + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x";
  for (int i = 7; i >= 0; --i) os << "0123456789abcdef"[(v >> (4 * i)) & 0xf];
  return os.str();
}

}  // namespace

DomainDataset load_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path,
                       std::string domain_id, Split split) {
  const auto img_bytes = read_file(images_path);
  const std::uint32_t img_magic = be32(img_bytes, 0, "images header");
  if (img_magic != kIdxImagesMagic) {
    throw ParseError("images magic " + hex32(img_magic) + ", expected " +
                     hex32(kIdxImagesMagic), 0);
  }
  const std::uint32_t n = be32(img_bytes, 4, "images header");
  const std::uint32_t h = be32(img_bytes, 8, "images header");
  const std::uint32_t w = be32(img_bytes, 12, "images header");
  const std::size_t want = 16 + static_cast<std::size_t>(n) * h * w;
  if (img_bytes.size() < want) {
    throw ParseError("truncated image payload, want " + std::to_string(want) + " bytes",
                     img_bytes.size());
  }
  if (img_bytes.size() > want) {
    throw ParseError("trailing bytes after image payload", want);
  }

  const auto lbl_bytes = read_file(labels_path);
  const std::uint32_t lbl_magic = be32(lbl_bytes, 0, "labels header");
  if (lbl_magic != kIdxLabelsMagic) {
    throw ParseError("labels magic " + hex32(lbl_magic) + ", expected " +
                     hex32(kIdxLabelsMagic), 0);
  }
  const std::uint32_t ln = be32(lbl_bytes, 4, "labels header");
  if (ln != n) {
    throw ParseError("image/label count mismatch: " + std::to_string(n) + " images vs " +
                     std::to_string(ln) + " labels", 4);
  }
  if (lbl_bytes.size() < 8 + static_cast<std::size_t>(ln)) {
    throw ParseError("truncated label payload", lbl_bytes.size());
  }
  if (lbl_bytes.size() > 8 + static_cast<std::size_t>(ln)) {
    throw ParseError("trailing bytes after label payload", 8 + static_cast<std::size_t>(ln));
  }

  DomainDataset ds;
  ds.domain_id = std::move(domain_id);
  ds.image_shape = {1, h, w};
  ds.split = split;
  ds.pixels.resize(static_cast<std::size_t>(n) * h * w);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) {
    ds.pixels[i] = static_cast<double>(img_bytes[16 + i]) / 127.5 - 1.0;
  }
  int max_label = 0;
  for (std::uint32_t i = 0; i < ln; ++i) {
    const int y = lbl_bytes[8 + i];
    max_label = std::max(max_label, y);
    ds.labels.push_back(y);
  }
  ds.class_count = max_label + 1;
  return ds;
}

void save_idx(const DomainDataset& ds, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
  if (ds.image_shape.size() != 3 || ds.image_shape[0] != 1) {
    throw ConfigError("save_idx: only single-channel datasets are supported");
  }
  std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
  if (!img) throw IoError("cannot open " + images_path.string() + " for writing");
  write_be32(img, kIdxImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(ds.image_shape[1]));
  write_be32(img, static_cast<std::uint32_t>(ds.image_shape[2]));
  for (double v : ds.pixels) {
    const long q = std::lround((v + 1.0) * 127.5);
    img.put(static_cast<char>(std::clamp(q, 0l, 255l)));
  }
  if (!img) throw IoError("write failed for " + images_path.string());

  std::ofstream lbl(labels_path, std::ios::binary | std::ios::trunc);
  if (!lbl) throw IoError("cannot open " + labels_path.string() + " for writing");
  write_be32(lbl, kIdxLabelsMagic);
  write_be32(lbl, static_cast<std::uint32_t>(ds.size()));
  for (const auto& l : ds.labels) {
    lbl.put(static_cast<char>(l.value_or(255)));
  }
  if (!lbl) throw IoError("write failed for " + labels_path.string());
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace {

DomainDataset select_items(const DomainDataset& ds, const std::vector<std::size_t>& idx) {
  DomainDataset out;
  out.domain_id = ds.domain_id;
  out.image_shape = ds.image_shape;
  out.class_count = ds.class_count;
  out.split = ds.split;
  const std::size_t elems = ds.image_elems();
  out.pixels.resize(idx.size() * elems);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(out.pixels.data() + i * elems, ds.pixels.data() + idx[i] * elems,
                elems * sizeof(double));
    out.labels.push_back(ds.labels[idx[i]]);
  }
  return out;
}

std::map<int, std::vector<std::size_t>> labeled_by_class(const DomainDataset& ds) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i]) by_class[*ds.labels[i]].push_back(i);
  }
  return by_class;
}

}  // namespace

DomainDataset subsample_per_class(const DomainDataset& ds, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("subsample_per_class: n must be >= 1");
  auto by_class = labeled_by_class(ds);
  std::vector<std::size_t> chosen;
  for (int c = 0; c < ds.class_count; ++c) {
    auto it = by_class.find(c);
    const std::size_t have = it == by_class.end() ? 0 : it->second.size();
    if (have < static_cast<std::size_t>(n)) {
      throw ConfigError("subsample_per_class: class " + std::to_string(c) + " has " +
                        std::to_string(have) + " labeled members, need " +
                        std::to_string(n));
    }
    std::vector<std::size_t> pool = it->second;
    rng::Stream s(rng::derive(seed, "subsample", static_cast<std::uint64_t>(c)));
    rng::shuffle(pool, s);
    pool.resize(static_cast<std::size_t>(n));
    std::sort(pool.begin(), pool.end());
    chosen.insert(chosen.end(), pool.begin(), pool.end());
  }
  return select_items(ds, chosen);
}

DomainDataset strip_labels(const DomainDataset& ds, double labeled_fraction,
                           std::uint64_t seed) {
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0) {
    throw ConfigError("strip_labels: labeled_fraction must lie in [0,1]");
  }
  DomainDataset out = ds;
  auto by_class = labeled_by_class(ds);
  for (const auto& [c, members] : by_class) {
    std::vector<std::size_t> pool = members;
    rng::Stream s(rng::derive(seed, "strip", static_cast<std::uint64_t>(c)));
    rng::shuffle(pool, s);
    const std::size_t keep = static_cast<std::size_t>(
        std::lround(labeled_fraction * static_cast<double>(pool.size())));
    for (std::size_t i = keep; i < pool.size(); ++i) out.labels[pool[i]] = std::nullopt;
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_iter(const DomainDataset& ds,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (ds.size() == 0) throw ConfigError("batch_iter: empty dataset");
  if (batch_size == 0 || batch_size > ds.size()) {
    throw ConfigError("batch_iter: batch size " + std::to_string(batch_size) +
                      " invalid for dataset of " + std::to_string(ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Stream s(rng::derive(seed, "epoch", epoch));
  rng::shuffle(order, s);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t end = std::min(order.size(), at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

Batch make_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty index list");
  const std::size_t elems = ds.image_elems();
  std::vector<double> data(indices.size() * elems);
  Batch b;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = ds.image(indices[i]);
    std::copy(img.begin(), img.end(), data.begin() + i * elems);
    b.labels.push_back(ds.labels[indices[i]]);
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), ds.image_shape.begin(), ds.image_shape.end());
  b.images = Tensor::from(std::move(shape), std::move(data));
  return b;
}

void export_pgm(const DomainDataset& ds, const std::filesystem::path& dir,
                const std::string& prefix) {
  if (ds.image_shape.size() != 3 || ds.image_shape[0] != 1) {
    throw ConfigError("export_pgm: only single-channel datasets are supported");
  }
  std::filesystem::create_directories(dir);
  const std::size_t H = ds.image_shape[1], W = ds.image_shape[2];
  std::ofstream manifest(dir / (prefix + "_manifest.csv"), std::ios::trunc);
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  manifest << "file,index,class,domain,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::ostringstream name;
    name << prefix << "_";
    std::string num = std::to_string(i);
    for (std::size_t p = num.size(); p < 5; ++p) name << '0';
    name << num << ".pgm";
    std::ofstream img(dir / name.str(), std::ios::binary | std::ios::trunc);
    if (!img) throw IoError("cannot write " + name.str());
    img << "P5\n" << W << " " << H << "\n255\n";
    for (double v : ds.image(i)) {
      const long q = std::lround((v + 1.0) * 127.5);
      img.put(static_cast<char>(std::clamp(q, 0l, 255l)));
    }
    manifest << name.str() << ',' << i << ','
             << (ds.labels[i] ? std::to_string(*ds.labels[i]) : std::string()) << ','
             << ds.domain_id << ',' << split_str(ds.split) << "\n";
  }
}

DomainPair make_glyph_pair(const GlyphPairConfig& cfg) {
  DomainPair pair;
  pair.src_train = gen_glyph_domain(cfg.source_style, cfg.source_per_class,
                                    rng::derive(cfg.seed, "src"), Split::train, "source");
  pair.src_val = gen_glyph_domain(cfg.source_style, cfg.val_per_class,
                                  rng::derive(cfg.seed, "src"), Split::val, "source");
  pair.src_test = gen_glyph_domain(cfg.source_style, cfg.test_per_class,
                                   rng::derive(cfg.seed, "src"), Split::test, "source");
  pair.tgt_train = gen_glyph_domain(cfg.target_style, cfg.target_pool_per_class,
                                    rng::derive(cfg.seed, "tgt"), Split::train, "target");
  pair.tgt_val = gen_glyph_domain(cfg.target_style, cfg.val_per_class,
                                  rng::derive(cfg.seed, "tgt"), Split::val, "target");
  pair.tgt_test = gen_glyph_domain(cfg.target_style, cfg.test_per_class,
                                   rng::derive(cfg.seed, "tgt"), Split::test, "target");
  return pair;
}

}  // namespace acal
