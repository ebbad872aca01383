#include "aatr/source_data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "aatr/error.hpp"

namespace aatr {

Shape LabeledImages::sample_shape() const {
  if (images.rank() == 0) return {};
  return Shape(images.shape().begin() + 1, images.shape().end());
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  Shape shape = images.shape();
  shape.at(0) = indices.size();
  const std::size_t stride = images.sample_size();
  std::vector<float> data;
  data.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    if (i >= size()) throw ConfigError("subset index out of range");
    auto s = images.sample(i);
    data.insert(data.end(), s.begin(), s.end());
    out.labels.push_back(labels[i]);
    out.source_index.push_back(source_index[i]);
  }
  out.images = Tensor(std::move(shape), std::move(data));
  return out;
}

void LabeledImages::validate() const {
  if (images.rank() == 0 || images.dim(0) != labels.size() ||
      source_index.size() != labels.size()) {
    throw ConfigError("labeled images: " + std::to_string(images.rank() ? images.dim(0) : 0) +
                      " images, " + std::to_string(labels.size()) + " labels, " +
                      std::to_string(source_index.size()) + " source indices");
  }
}

namespace {

class GzReader {
 public:
  explicit GzReader(const std::filesystem::path& path) : path_(path) {
    file_ = gzopen(path.string().c_str(), "rb");
    if (file_ == nullptr) throw IoError("cannot open '" + path.string() + "'");
  }
  ~GzReader() { gzclose(file_); }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(void* dst, std::size_t n) {
    auto* out = static_cast<unsigned char*>(dst);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(file_, out, chunk);
      if (got <= 0) throw IoError("'" + path_.string() + "' is truncated");
      out += got;
      n -= static_cast<std::size_t>(got);
    }
  }

  std::uint32_t read_u32_be() {
    std::array<unsigned char, 4> b{};
    read(b.data(), 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
  }

 private:
  std::filesystem::path path_;
  gzFile file_ = nullptr;
};

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    auto p = dir / (stem + suffix);
    if (std::filesystem::exists(p)) return p;
  }
  throw IoError("no '" + stem + "[.gz]' in '" + dir.string() + "'");
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

std::vector<std::size_t> seeded_choice(std::size_t pool, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, pool));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

LabeledImages read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  GzReader img(images);
  if (img.read_u32_be() != 0x00000803u) throw IoError("'" + images.string() + "' is not IDX3 ubyte");
  const std::size_t n = img.read_u32_be();
  const std::size_t rows = img.read_u32_be();
  const std::size_t cols = img.read_u32_be();
  std::vector<unsigned char> pixels(n * rows * cols);
  img.read(pixels.data(), pixels.size());

  GzReader lab(labels);
  if (lab.read_u32_be() != 0x00000801u) throw IoError("'" + labels.string() + "' is not IDX1 ubyte");
  const std::size_t n_labels = lab.read_u32_be();
  if (n_labels != n) {
    throw IoError("'" + labels.string() + "' has " + std::to_string(n_labels) + " labels for " +
                  std::to_string(n) + " images");
  }
  std::vector<unsigned char> raw_labels(n);
  lab.read(raw_labels.data(), n);

  LabeledImages out;
  std::vector<float> data(pixels.size());
  std::transform(pixels.begin(), pixels.end(), data.begin(),
                 [](unsigned char p) { return static_cast<float>(p) / 255.0f; });
  out.images = Tensor({n, 1, rows, cols}, std::move(data));
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  out.source_index.resize(n);
  std::iota(out.source_index.begin(), out.source_index.end(), 0u);
  return out;
}

void write_idx(const LabeledImages& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  data.validate();
  const Shape s = data.sample_shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("IDX export needs 1xHxW images");
  for (const auto& path : {images, labels}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream img(images, std::ios::binary | std::ios::trunc);
  if (!img) throw IoError("cannot open '" + images.string() + "' for writing");
  write_u32_be(img, 0x00000803u);
  write_u32_be(img, static_cast<std::uint32_t>(data.size()));
  write_u32_be(img, static_cast<std::uint32_t>(s[1]));
  write_u32_be(img, static_cast<std::uint32_t>(s[2]));
  for (float v : data.images.storage()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  }
  std::ofstream lab(labels, std::ios::binary | std::ios::trunc);
  if (!lab) throw IoError("cannot open '" + labels.string() + "' for writing");
  write_u32_be(lab, 0x00000801u);
  write_u32_be(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw IoError("error writing IDX files");
}

SourceData load_mnist(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_test,
                      std::uint64_t seed) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("MNIST directory '" + dir.string() + "' does not exist");
  }
  LabeledImages train_pool = read_idx(find_idx(dir, "train-images-idx3-ubyte"),
                                      find_idx(dir, "train-labels-idx1-ubyte"));
  LabeledImages test_pool = read_idx(find_idx(dir, "t10k-images-idx3-ubyte"),
                                     find_idx(dir, "t10k-labels-idx1-ubyte"));
  const auto offset = static_cast<std::uint32_t>(train_pool.size());
  for (auto& i : test_pool.source_index) i += offset;

  SourceData out;
  out.id = "mnist";
  out.train = train_pool.subset(seeded_choice(train_pool.size(), n_train, seed));
  out.test = test_pool.subset(seeded_choice(test_pool.size(), n_test, seed ^ 0x9e3779b97f4a7c15ULL));
  return out;
}

namespace {

// Seven-segment layout: a top, b upper right, c lower right, d bottom,
// e lower left, f upper left, g middle.
constexpr std::array<const char*, 10> kSegments = {"abcdef", "bc",     "abged", "abgcd", "fgbc",
                                                   "afgcd",  "afgedc", "abc",   "abcdefg", "abcdfg"};

void draw_segment(std::vector<float>& img, char seg, int dx, int dy, int thick, float ink) {
  const int left = 8 + dx, right = 19 + dx, top = 4 + dy, mid = 13 + dy, bottom = 23 + dy;
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  switch (seg) {
    case 'a': x0 = left; x1 = right; y0 = y1 = top; break;
    case 'g': x0 = left; x1 = right; y0 = y1 = mid; break;
    case 'd': x0 = left; x1 = right; y0 = y1 = bottom; break;
    case 'f': x0 = x1 = left; y0 = top; y1 = mid; break;
    case 'e': x0 = x1 = left; y0 = mid; y1 = bottom; break;
    case 'b': x0 = x1 = right; y0 = top; y1 = mid; break;
    case 'c': x0 = x1 = right; y0 = mid; y1 = bottom; break;
    default: return;
  }
  for (int y = y0; y <= y1 + thick - 1; ++y) {
    for (int x = x0; x <= x1 + thick - 1; ++x) {
      if (x < 0 || x >= 28 || y < 0 || y >= 28) continue;
      float& px = img[static_cast<std::size_t>(y * 28 + x)];
      px = std::max(px, ink);
    }
  }
}

LabeledImages synth_split(std::size_t n, std::mt19937_64& rng, std::uint32_t index_offset) {
  std::uniform_int_distribution<int> shift(-2, 2);
  std::uniform_int_distribution<int> thickness(2, 3);
  std::uniform_real_distribution<float> ink(0.7f, 1.0f);
  std::uniform_real_distribution<float> noise(0.0f, 0.1f);
  LabeledImages out;
  std::vector<float> data;
  data.reserve(n * 784);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    std::vector<float> img(784, 0.0f);
    const int dx = shift(rng), dy = shift(rng), thick = thickness(rng);
    const float k = ink(rng);
    for (const char* s = kSegments[static_cast<std::size_t>(label)]; *s; ++s) {
      draw_segment(img, *s, dx, dy, thick, k);
    }
    for (float& v : img) v = std::min(1.0f, v + noise(rng));
    data.insert(data.end(), img.begin(), img.end());
    out.labels.push_back(label);
    out.source_index.push_back(index_offset + static_cast<std::uint32_t>(i));
  }
  out.images = Tensor({n, 1, 28, 28}, std::move(data));
  return out;
}

}  // namespace

SourceData synthetic_digits(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SourceData out;
  out.id = "synthetic-digits";
  out.train = synth_split(n_train, rng, 0);
  out.test = synth_split(n_test, rng, static_cast<std::uint32_t>(n_train));
  return out;
}

}  // namespace aatr
