#include "semab/data.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace semab {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

const std::vector<std::string>& cifar10_names() {
  static const std::vector<std::string> names = {"airplane", "automobile", "bird", "cat", "deer",
                                                 "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

std::uint32_t read_le32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t{b[at]} | (std::uint32_t{b[at + 1]} << 8) |
         (std::uint32_t{b[at + 2]} << 16) | (std::uint32_t{b[at + 3]} << 24);
}

void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::string> numbered_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back(std::to_string(i));
  return names;
}

Tensor bytes_to_image(const std::uint8_t* px, std::size_t c, std::size_t h, std::size_t w) {
  Tensor img({c, h, w});
  for (std::size_t i = 0; i < c * h * w; ++i) img[i] = px[i] / 255.0;
  return img;
}

}  // namespace

std::vector<std::size_t> LabeledDataset::class_histogram() const {
  std::vector<std::size_t> hist(num_classes(), 0);
  for (std::size_t label : labels) {
    if (label < hist.size()) ++hist[label];
  }
  return hist;
}

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) {
    throw Error("invalid_dataset", std::to_string(images.size()) + " images but " +
                                       std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_names.size()) {
      throw Error("invalid_dataset", "label " + std::to_string(labels[i]) + " at index " +
                                         std::to_string(i) + " but only " +
                                         std::to_string(class_names.size()) + " classes");
    }
    if (images[i].shape != images.front().shape) {
      throw Error("invalid_dataset", "image " + std::to_string(i) + " has shape " +
                                         to_string(images[i].shape) + ", expected " +
                                         to_string(images.front().shape));
    }
  }
}

double HoldOutSplit::recompute_skew() const {
  if (test_examples.empty()) return 0.0;
  const auto anomalies = std::count_if(test_examples.begin(), test_examples.end(),
                                       [](const TestExample& e) { return e.is_anomaly; });
  return static_cast<double>(anomalies) / static_cast<double>(test_examples.size());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

LabeledDataset parse_cifar_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    throw Error("truncated_record", "CIFAR binary length " + std::to_string(bytes.size()) +
                                        " is not a multiple of " + std::to_string(kCifarRecord));
  }
  LabeledDataset ds;
  ds.class_names = cifar10_names();
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw Error("bad_label", "record " + std::to_string(r) + " has label byte " +
                                   std::to_string(rec[0]) + " > 9");
    }
    ds.labels.push_back(rec[0]);
    ds.images.push_back(bytes_to_image(rec + 1, 3, kCifarSide, kCifarSide));
  }
  return ds;
}

LabeledDataset load_cifar_binary(const std::filesystem::path& path) {
  return parse_cifar_binary(read_file(path));
}

LabeledDataset load_cifar_binary(std::span<const std::filesystem::path> paths) {
  LabeledDataset all;
  all.class_names = cifar10_names();
  for (const auto& p : paths) {
    LabeledDataset part = load_cifar_binary(p);
    std::move(part.images.begin(), part.images.end(), std::back_inserter(all.images));
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16 || read_be32(img, 0) != 0x00000803) {
    throw Error("bad_magic", "'" + images_path.string() + "' is not an IDX image file (magic 0x00000803)");
  }
  if (lab.size() < 8 || read_be32(lab, 0) != 0x00000801) {
    throw Error("bad_magic", "'" + labels_path.string() + "' is not an IDX label file (magic 0x00000801)");
  }
  const std::size_t n = read_be32(img, 4);
  const std::size_t h = read_be32(img, 8);
  const std::size_t w = read_be32(img, 12);
  const std::size_t n_labels = read_be32(lab, 4);
  if (n != n_labels) {
    throw Error("count_mismatch", "count mismatch: " + std::to_string(n) + " images vs " +
                                      std::to_string(n_labels) + " labels");
  }
  if (img.size() != 16 + n * h * w) {
    throw Error("size_mismatch", "IDX image payload is " + std::to_string(img.size() - 16) +
                                     " bytes, header implies " + std::to_string(n * h * w));
  }
  if (lab.size() != 8 + n) {
    throw Error("size_mismatch", "IDX label payload is " + std::to_string(lab.size() - 8) +
                                     " bytes, header implies " + std::to_string(n));
  }
  LabeledDataset ds;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(lab[8 + i]);
    k = std::max<std::size_t>(k, lab[8 + i] + 1u);
    ds.images.push_back(bytes_to_image(img.data() + 16 + i * h * w, 1, h, w));
  }
  ds.class_names = numbered_names(k);
  return ds;
}

LabeledDataset parse_raw_tensor(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 4 + 6 * 4;
  if (bytes.size() < header || !std::equal(bytes.begin(), bytes.begin() + 4, "SEMT")) {
    throw Error("bad_magic", "raw tensor file does not start with 'SEMT'");
  }
  const std::uint32_t version = read_le32(bytes, 4);
  if (version != 1) throw Error("bad_version", "unsupported raw tensor version " + std::to_string(version));
  const std::size_t n = read_le32(bytes, 8);
  const std::size_t c = read_le32(bytes, 12);
  const std::size_t h = read_le32(bytes, 16);
  const std::size_t w = read_le32(bytes, 20);
  const std::size_t k = read_le32(bytes, 24);
  const std::size_t expect = header + n + n * c * h * w;
  if (bytes.size() != expect) {
    throw Error("size_mismatch", "raw tensor file is " + std::to_string(bytes.size()) +
                                     " bytes, header implies " + std::to_string(expect));
  }
  LabeledDataset ds;
  ds.class_names = numbered_names(k);
  const std::uint8_t* labels = bytes.data() + header;
  const std::uint8_t* pixels = labels + n;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw Error("bad_label", "label " + std::to_string(labels[i]) + " at index " +
                                   std::to_string(i) + " >= K = " + std::to_string(k));
    }
    ds.labels.push_back(labels[i]);
    ds.images.push_back(bytes_to_image(pixels + i * c * h * w, c, h, w));
  }
  return ds;
}

LabeledDataset load_raw_tensor(const std::filesystem::path& path) {
  return parse_raw_tensor(read_file(path));
}

void write_raw_tensor(const LabeledDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  if (dataset.num_classes() > 256) throw Error("unsupported", "raw tensor labels are single bytes");
  const Shape shape = dataset.size() ? dataset.image_shape() : Shape{0, 0, 0};
  if (shape.size() != 3) throw Error("shape_mismatch", "raw tensor images must be C x H x W");
  std::vector<std::uint8_t> out = {'S', 'E', 'M', 'T'};
  put_le32(out, 1);
  put_le32(out, static_cast<std::uint32_t>(dataset.size()));
  for (std::size_t d : shape) put_le32(out, static_cast<std::uint32_t>(d));
  put_le32(out, static_cast<std::uint32_t>(dataset.num_classes()));
  for (std::size_t label : dataset.labels) out.push_back(static_cast<std::uint8_t>(label));
  for (const Tensor& img : dataset.images) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0)));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("io_error", "cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

// --- synthetic shapes --------------------------------------------------------

ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "disk") return ShapeKind::disk;
  if (name == "square") return ShapeKind::square;
  if (name == "cross") return ShapeKind::cross;
  if (name == "bar") return ShapeKind::bar;
  throw Error("unknown_shape", "unknown shape kind '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::cross: return "cross";
    case ShapeKind::bar: return "bar";
  }
  return "unknown";
}

namespace {

using Colour = std::array<double, 3>;

// Low-contrast stripe pattern over a base colour.
struct Texture {
  Colour base{};
  double amplitude = 0, dir_x = 1, dir_y = 0, freq = 1, phase = 0;

  static Texture draw(Rng& rng) {
    Texture t;
    for (auto& v : t.base) v = rng.uniform(0.15, 0.85);
    t.amplitude = rng.uniform(0.03, 0.12);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    t.dir_x = std::cos(angle);
    t.dir_y = std::sin(angle);
    t.freq = rng.uniform(1.5, 5.0);
    t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return t;
  }

  double luminance() const { return (base[0] + base[1] + base[2]) / 3.0; }

  double at(std::size_t c, double u, double v) const {
    return base[c] + amplitude * std::sin(2.0 * std::numbers::pi * freq * (u * dir_x + v * dir_y) + phase);
  }
};

// Membership in the canonical (upright) shape of half-extent 1.
bool inside(ShapeKind kind, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (kind) {
    case ShapeKind::disk: return u * u + v * v <= 1.0;
    case ShapeKind::square: return au <= 0.8 && av <= 0.8;
    case ShapeKind::cross: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case ShapeKind::bar: return au <= 0.28 && av <= 1.0;
  }
  return false;
}

Tensor draw_shape(ShapeKind kind, std::size_t side, Rng& rng) {
  const Texture background = Texture::draw(rng);
  Texture foreground = Texture::draw(rng);
  // keep the figure distinguishable from the ground
  const double gap = foreground.luminance() - background.luminance();
  if (std::abs(gap) < 0.3) {
    const double shift = (background.luminance() < 0.5 ? 0.3 : -0.3) - gap;
    for (auto& v : foreground.base) v = std::clamp(v + shift, 0.0, 1.0);
  }
  const double radius = rng.uniform(0.28, 0.42);
  const double cx = rng.uniform(radius, 1.0 - radius);
  const double cy = rng.uniform(radius, 1.0 - radius);
  const double tilt = rng.uniform(-std::numbers::pi / 12, std::numbers::pi / 12);
  const double ct = std::cos(tilt), st = std::sin(tilt);
  const double noise = 0.03;
  // lit from above: shading darkens toward the bottom of the figure
  const double shade = rng.uniform(0.15, 0.3);

  Tensor img({3, side, side});
  const double inv = 1.0 / static_cast<double>(side);
  constexpr int kSub = 2;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      double cover = 0.0;
      double vmean = 0.0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = (static_cast<double>(x) + (sx + 0.5) / kSub) * inv - cx;
          const double py = (static_cast<double>(y) + (sy + 0.5) / kSub) * inv - cy;
          const double u = (ct * px + st * py) / radius;
          const double v = (-st * px + ct * py) / radius;
          if (inside(kind, u, v)) {
            cover += 1.0;
            vmean += v;
          }
        }
      }
      cover /= kSub * kSub;
      const double v = cover > 0 ? vmean / (cover * kSub * kSub) : 0.0;
      const double light = 1.0 - shade * 0.5 * (v + 1.0);
      const double u0 = (static_cast<double>(x) + 0.5) * inv;
      const double v0 = (static_cast<double>(y) + 0.5) * inv;
      for (std::size_t c = 0; c < 3; ++c) {
        const double fg = foreground.at(c, u0, v0) * light;
        const double bg = background.at(c, u0, v0);
        const double value = cover * fg + (1.0 - cover) * bg + noise * rng.normal();
        img.at(c, y, x) = std::clamp(value, 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace

LabeledDataset synth_shapes(std::size_t n_per_class, std::span<const ShapeKind> classes,
                            std::size_t image_size, Rng rng) {
  if (image_size < 16) {
    throw Error("image_too_small", "synth_shapes: image_size " + std::to_string(image_size) + " < 16");
  }
  if (classes.empty()) throw Error("empty_input", "synth_shapes: no classes");
  LabeledDataset ds;
  for (ShapeKind k : classes) ds.class_names.emplace_back(to_string(k));
  // interleave classes so prefixes stay balanced
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      Rng local = rng.substream("synth_shapes/example", i * classes.size() + c);
      ds.images.push_back(draw_shape(classes[c], image_size, local));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// --- hold-out-class protocol --------------------------------------------------

HoldOutSplit make_holdout_split(const LabeledDataset& train, const LabeledDataset& test,
                                std::size_t held_out_class, std::size_t trials_per_class) {
  train.validate();
  test.validate();
  const std::size_t k = train.num_classes();
  if (test.class_names != train.class_names) {
    throw Error("class_mismatch", "train and test datasets have different class sets");
  }
  if (held_out_class >= k) {
    throw Error("out_of_range", "held-out class " + std::to_string(held_out_class) + " >= " + std::to_string(k));
  }
  if (k < 2) throw Error("too_few_classes", "hold-out protocol needs at least 2 classes");
  const auto test_hist = test.class_histogram();
  for (std::size_t c = 0; c < k; ++c) {
    if (test_hist[c] == 0) {
      throw Error("class_absent", "class '" + test.class_names[c] + "' is absent from the test set");
    }
  }

  HoldOutSplit split;
  split.held_out_class = held_out_class;
  split.held_out_name = train.class_names[held_out_class];
  split.trials = trials_per_class;
  std::vector<std::size_t> remap(k, 0);
  for (std::size_t c = 0, next = 0; c < k; ++c) {
    if (c == held_out_class) continue;
    remap[c] = next++;
    split.source_classes.push_back(c);
    split.train.class_names.push_back(train.class_names[c]);
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] == held_out_class) continue;
    split.train.images.push_back(train.images[i]);
    split.train.labels.push_back(remap[train.labels[i]]);
  }
  split.test_examples.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    TestExample e;
    e.image = test.images[i];
    e.is_anomaly = test.labels[i] == held_out_class;
    if (!e.is_anomaly) e.label = remap[test.labels[i]];
    split.test_examples.push_back(std::move(e));
  }
  split.skew = split.recompute_skew();
  return split;
}

std::vector<HoldOutSplit> make_holdout_splits(const LabeledDataset& train, const LabeledDataset& test,
                                              std::size_t trials_per_class) {
  std::vector<HoldOutSplit> splits;
  for (std::size_t c = 0; c < train.num_classes(); ++c) {
    splits.push_back(make_holdout_split(train, test, c, trials_per_class));
  }
  return splits;
}

}  // namespace semab
