#include "lddpm/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>
#include <sstream>

namespace lddpm {

std::string to_string(ResizeKind k) {
  switch (k) {
    case ResizeKind::nearest: return "nearest";
    case ResizeKind::bilinear: return "bilinear";
    case ResizeKind::bicubic: return "bicubic";
  }
  return "?";
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::blur: return "blur";
    case Stage::resize: return "resize";
    case Stage::noise: return "noise";
    case Stage::jpeg: return "jpeg";
  }
  return "?";
}

std::string to_string(Profile p) { return p == Profile::clean ? "clean" : "realistic"; }

Profile parse_profile(const std::string& name) {
  if (name == "clean") return Profile::clean;
  if (name == "realistic") return Profile::realistic;
  throw std::invalid_argument("unknown degradation profile '" + name + "' (clean|realistic)");
}

namespace {

ResizeKind parse_resize(const std::string& s) {
  if (s == "nearest") return ResizeKind::nearest;
  if (s == "bilinear") return ResizeKind::bilinear;
  if (s == "bicubic") return ResizeKind::bicubic;
  throw std::invalid_argument("unknown resize kind '" + s + "'");
}

Stage parse_stage(const std::string& s) {
  if (s == "blur") return Stage::blur;
  if (s == "resize") return Stage::resize;
  if (s == "noise") return Stage::noise;
  if (s == "jpeg") return Stage::jpeg;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

struct Taps {
  std::vector<int> index;    // [out * taps]
  std::vector<double> weight;
  int taps = 0;
};

// Source taps per output coordinate for a 1-D resampling kernel of half-width `support`.
template <class Kernel>
Taps make_taps(int in, int out, double support, Kernel kernel) {
  Taps t;
  t.taps = static_cast<int>(std::ceil(support)) * 2;
  const double ratio = static_cast<double>(in) / out;
  t.index.resize(static_cast<std::size_t>(out) * t.taps);
  t.weight.resize(t.index.size());
  for (int o = 0; o < out; ++o) {
    const double x = (o + 0.5) * ratio - 0.5;
    const int first = static_cast<int>(std::floor(x)) - t.taps / 2 + 1;
    double total = 0.0;
    for (int k = 0; k < t.taps; ++k) {
      const int src = first + k;
      const double w = kernel(x - src);
      t.index[static_cast<std::size_t>(o) * t.taps + k] = std::clamp(src, 0, in - 1);
      t.weight[static_cast<std::size_t>(o) * t.taps + k] = w;
      total += w;
    }
    for (int k = 0; k < t.taps; ++k) t.weight[static_cast<std::size_t>(o) * t.taps + k] /= total;
  }
  return t;
}

Tensor separable(const Tensor& image, int out_h, int out_w, const Taps& th, const Taps& tw) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor tmp({c, h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const float* row = image.data() + (static_cast<std::int64_t>(ch) * h + y) * w;
      float* dst = tmp.data() + (static_cast<std::int64_t>(ch) * h + y) * out_w;
      for (int o = 0; o < out_w; ++o) {
        double acc = 0.0;
        for (int k = 0; k < tw.taps; ++k) {
          const std::size_t j = static_cast<std::size_t>(o) * tw.taps + k;
          acc += tw.weight[j] * row[tw.index[j]];
        }
        dst[o] = static_cast<float>(acc);
      }
    }
  }
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const float* src = tmp.data() + static_cast<std::int64_t>(ch) * h * out_w;
    for (int o = 0; o < out_h; ++o) {
      float* dst = out.data() + (static_cast<std::int64_t>(ch) * out_h + o) * out_w;
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < th.taps; ++k) {
          const std::size_t j = static_cast<std::size_t>(o) * th.taps + k;
          acc += th.weight[j] * src[static_cast<std::int64_t>(th.index[j]) * out_w + x];
        }
        dst[x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

void check_target(const Tensor& image, int out_h, int out_w, const char* what) {
  check_image(image, what);
  if (out_h <= 0 || out_w <= 0) {
    throw std::invalid_argument(std::string(what) + ": target size must be positive, got " + std::to_string(out_h) +
                                "x" + std::to_string(out_w));
  }
}

double linear_weight(double x) {
  x = std::abs(x);
  return x < 1.0 ? 1.0 - x : 0.0;
}

}  // namespace

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

Tensor bicubic_resize(const Tensor& image, int out_h, int out_w) {
  check_target(image, out_h, out_w, "bicubic_resize");
  if (out_h == image.dim(1) && out_w == image.dim(2)) return image;
  return separable(image, out_h, out_w, make_taps(image.dim(1), out_h, 2.0, cubic_weight),
                   make_taps(image.dim(2), out_w, 2.0, cubic_weight));
}

Tensor bilinear_resize(const Tensor& image, int out_h, int out_w) {
  check_target(image, out_h, out_w, "bilinear_resize");
  if (out_h == image.dim(1) && out_w == image.dim(2)) return image;
  return separable(image, out_h, out_w, make_taps(image.dim(1), out_h, 1.0, linear_weight),
                   make_taps(image.dim(2), out_w, 1.0, linear_weight));
}

Tensor nearest_resize(const Tensor& image, int out_h, int out_w) {
  check_target(image, out_h, out_w, "nearest_resize");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < out_h; ++y) {
      const int sy = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * h / out_h)));
      for (int x = 0; x < out_w; ++x) {
        const int sx = std::min(w - 1, static_cast<int>(std::floor((x + 0.5) * w / out_w)));
        out[(static_cast<std::int64_t>(ch) * out_h + y) * out_w + x] =
            image[(static_cast<std::int64_t>(ch) * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Tensor resize(const Tensor& image, int out_h, int out_w, ResizeKind kind) {
  switch (kind) {
    case ResizeKind::nearest: return nearest_resize(image, out_h, out_w);
    case ResizeKind::bilinear: return bilinear_resize(image, out_h, out_w);
    case ResizeKind::bicubic: return bicubic_resize(image, out_h, out_w);
  }
  throw std::invalid_argument("bad resize kind");
}

Tensor bicubic_resize_batch(const Tensor& batch, int out_h, int out_w) {
  if (batch.rank() != 4) throw ShapeError("bicubic_resize_batch expects [N, C, H, W]");
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out({n, c, out_h, out_w});
  const std::int64_t in_sz = static_cast<std::int64_t>(c) * h * w, out_sz = static_cast<std::int64_t>(c) * out_h * out_w;
  for (int i = 0; i < n; ++i) {
    // Channels are resized independently, so any channel count goes through as [c, h, w] slices of one.
    for (int ch = 0; ch < c; ++ch) {
      Tensor one({1, h, w}, std::vector<float>(batch.data() + i * in_sz + static_cast<std::int64_t>(ch) * h * w,
                                               batch.data() + i * in_sz + static_cast<std::int64_t>(ch + 1) * h * w));
      Tensor r = bicubic_resize(one, out_h, out_w);
      std::copy(r.data(), r.data() + r.size(), out.data() + i * out_sz + static_cast<std::int64_t>(ch) * out_h * out_w);
    }
  }
  return out;
}

bool operator==(const BlurSpec& a, const BlurSpec& b) {
  return a.kind == b.kind && a.sigma_x == b.sigma_x && a.sigma_y == b.sigma_y && a.angle == b.angle &&
         a.kernel_size == b.kernel_size;
}

Tensor gaussian_kernel(const BlurSpec& spec) {
  const int k = spec.kernel_size;
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("blur kernel size must be odd and positive");
  if (!(spec.sigma_x > 0.0) || !(spec.sigma_y > 0.0)) throw std::invalid_argument("blur sigma must be positive");
  const double c = std::cos(spec.angle), s = std::sin(spec.angle);
  const double vx = spec.sigma_x * spec.sigma_x, vy = spec.sigma_y * spec.sigma_y;
  // Inverse covariance of R diag(vx, vy) R^T.
  const double i00 = c * c / vx + s * s / vy;
  const double i11 = s * s / vx + c * c / vy;
  const double i01 = c * s * (1.0 / vx - 1.0 / vy);
  const int r = k / 2;
  std::vector<double> vals(static_cast<std::size_t>(k) * k);
  double total = 0.0;
  for (int y = -r; y <= r; ++y) {
    for (int x = -r; x <= r; ++x) {
      const double q = i00 * x * x + 2.0 * i01 * x * y + i11 * y * y;
      const double v = std::exp(-0.5 * q);
      vals[static_cast<std::size_t>(y + r) * k + (x + r)] = v;
      total += v;
    }
  }
  Tensor out({k, k});
  for (std::size_t i = 0; i < vals.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<float>(vals[i] / total);
  return out;
}

Tensor filter2d(const Tensor& image, const Tensor& kernel) {
  check_image(image, "filter2d");
  if (kernel.rank() != 2 || kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0) {
    throw ShapeError("filter2d expects an odd square kernel");
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2), k = kernel.dim(0), r = k / 2;
  Tensor out(image.shape());
  for (int ch = 0; ch < c; ++ch) {
    const float* src = image.data() + static_cast<std::int64_t>(ch) * h * w;
    float* dst = out.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          const int sy = std::clamp(y + dy, 0, h - 1);
          for (int dx = -r; dx <= r; ++dx) {
            const int sx = std::clamp(x + dx, 0, w - 1);
            acc += static_cast<double>(kernel[(dy + r) * k + (dx + r)]) * src[sy * w + sx];
          }
        }
        dst[y * w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

std::vector<Stage> DegradationPlan::enabled_stages() const {
  std::vector<Stage> s;
  if (blur.kind != BlurKind::none) s.push_back(Stage::blur);
  s.push_back(Stage::resize);
  if (noise_sigma > 0.0) s.push_back(Stage::noise);
  if (jpeg_quality) s.push_back(Stage::jpeg);
  return s;
}

void DegradationPlan::validate() const {
  if (scale < 1) throw std::invalid_argument("scale must be >= 1");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("noise_sigma must be >= 0");
  if (jpeg_quality && (*jpeg_quality < 10 || *jpeg_quality > 100)) {
    throw std::invalid_argument("jpeg quality must be in [10, 100]");
  }
  if (blur.kind != BlurKind::none) {
    if (blur.kernel_size < 1 || blur.kernel_size % 2 == 0) throw std::invalid_argument("blur kernel size must be odd");
    if (!(blur.sigma_x > 0.0) || !(blur.sigma_y > 0.0)) throw std::invalid_argument("blur sigma must be positive");
    if (blur.kind == BlurKind::isotropic && blur.sigma_x != blur.sigma_y) {
      throw std::invalid_argument("isotropic blur needs sigma_x == sigma_y");
    }
  }
  std::vector<Stage> a = enabled_stages(), b = order;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a != b) throw std::invalid_argument("plan order must list each enabled stage exactly once");
}

std::string DegradationPlan::to_string() const {
  std::ostringstream os;
  os.precision(17);
  os << "blur=";
  switch (blur.kind) {
    case BlurKind::none: os << "none"; break;
    case BlurKind::isotropic: os << "iso:" << blur.sigma_x << ':' << blur.kernel_size; break;
    case BlurKind::anisotropic:
      os << "aniso:" << blur.sigma_x << ':' << blur.sigma_y << ':' << blur.angle << ':' << blur.kernel_size;
      break;
  }
  os << " resize=" << lddpm::to_string(resize_kind) << " scale=" << scale << " noise=" << noise_sigma << " jpeg=";
  if (jpeg_quality) {
    os << *jpeg_quality;
  } else {
    os << "none";
  }
  os << " order=";
  for (std::size_t i = 0; i < order.size(); ++i) os << (i ? "," : "") << lddpm::to_string(order[i]);
  return os.str();
}

DegradationPlan DegradationPlan::parse(const std::string& line) {
  DegradationPlan p;
  std::istringstream is(line);
  std::string tok;
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) parts.push_back(cur);
    return parts;
  };
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad plan token '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "blur") {
      auto f = split(val, ':');
      if (f[0] == "none") {
        p.blur = {};
      } else if (f[0] == "iso" && f.size() == 3) {
        p.blur = {BlurKind::isotropic, std::stod(f[1]), std::stod(f[1]), 0.0, std::stoi(f[2])};
      } else if (f[0] == "aniso" && f.size() == 5) {
        p.blur = {BlurKind::anisotropic, std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoi(f[4])};
      } else {
        throw std::invalid_argument("bad blur spec '" + val + "'");
      }
    } else if (key == "resize") {
      p.resize_kind = parse_resize(val);
    } else if (key == "scale") {
      p.scale = std::stoi(val);
    } else if (key == "noise") {
      p.noise_sigma = std::stod(val);
    } else if (key == "jpeg") {
      p.jpeg_quality = val == "none" ? std::nullopt : std::optional<int>(std::stoi(val));
    } else if (key == "order") {
      p.order.clear();
      for (const auto& s : split(val, ',')) p.order.push_back(parse_stage(s));
    } else {
      throw std::invalid_argument("unknown plan key '" + key + "'");
    }
  }
  p.validate();
  return p;
}

DegradationPlan sample_plan(std::uint64_t seed, Profile profile, int scale, const RealisticRanges& ranges) {
  if (scale < 1) throw std::invalid_argument("scale must be >= 1");
  DegradationPlan p;
  p.scale = scale;
  if (profile == Profile::clean) return p;
  Rng rng(seed);
  const double u = rng.uniform();
  if (u >= 0.2) {
    p.blur.kernel_size = ranges.kernel_min + 2 * rng.uniform_int(0, (ranges.kernel_max - ranges.kernel_min) / 2);
    p.blur.sigma_x = rng.uniform(ranges.sigma_min, ranges.sigma_max);
    if (u < 0.6) {
      p.blur.kind = BlurKind::isotropic;
      p.blur.sigma_y = p.blur.sigma_x;
    } else {
      p.blur.kind = BlurKind::anisotropic;
      p.blur.sigma_y = rng.uniform(ranges.sigma_min, ranges.sigma_max);
      p.blur.angle = rng.uniform(0.0, std::numbers::pi);
    }
  }
  p.resize_kind = static_cast<ResizeKind>(rng.uniform_int(0, 2));
  if (rng.uniform() < ranges.noise_prob) p.noise_sigma = rng.uniform(1.0 / 255.0, ranges.noise_max);
  if (rng.uniform() < ranges.jpeg_prob) p.jpeg_quality = rng.uniform_int(ranges.jpeg_min, ranges.jpeg_max);
  p.order = p.enabled_stages();
  for (std::size_t i = p.order.size(); i > 1; --i) {
    std::swap(p.order[i - 1], p.order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  }
  return p;
}

SamplePair apply_degradation(const Tensor& hr, const DegradationPlan& plan, std::uint64_t seed) {
  check_image(hr, "apply_degradation");
  plan.validate();
  if (hr.dim(1) % plan.scale != 0 || hr.dim(2) % plan.scale != 0) {
    throw std::invalid_argument("scale " + std::to_string(plan.scale) + " does not divide HR size " +
                                shape_str(hr.shape()));
  }
  Rng rng(seed);
  Tensor img = signed_to_unit(hr);
  for (Stage s : plan.order) {
    switch (s) {
      case Stage::blur: img = filter2d(img, gaussian_kernel(plan.blur)); break;
      case Stage::resize:
        img = resize(img, hr.dim(1) / plan.scale, hr.dim(2) / plan.scale, plan.resize_kind);
        break;
      case Stage::noise:
        for (float& v : img.values()) v += static_cast<float>(plan.noise_sigma * rng.normal());
        break;
      case Stage::jpeg: img = jpeg_roundtrip(img, *plan.jpeg_quality); break;
    }
  }
  for (float& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
  SamplePair pair;
  pair.hr = hr;
  for (float& v : pair.hr.values()) v = std::clamp(v, -1.0f, 1.0f);
  pair.lr = unit_to_signed(img);
  pair.plan = plan;
  return pair;
}

namespace {

Tensor to_channels(const Tensor& img, int channels) {
  if (img.dim(0) == channels) return img;
  if (channels == 1) return luma(img);
  const int hw = img.dim(1) * img.dim(2);
  Tensor out({3, img.dim(1), img.dim(2)});
  for (int ch = 0; ch < 3; ++ch) std::copy(img.data(), img.data() + hw, out.data() + static_cast<std::int64_t>(ch) * hw);
  return out;
}

}  // namespace

DatasetIterator::DatasetIterator(const std::filesystem::path& root, DatasetOptions opts) : opts_(opts) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::invalid_argument("dataset directory not found: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      images_.push_back(read_png(f));
      names_.push_back(fs::relative(f, root).string());
    } catch (const std::exception& ex) {
      std::cerr << "warning: skipping " << f.string() << ": " << ex.what() << '\n';
    }
  }
  check_images();
}

DatasetIterator::DatasetIterator(std::vector<Tensor> images, std::vector<std::string> names, DatasetOptions opts)
    : images_(std::move(images)), names_(std::move(names)), opts_(opts) {
  if (names_.size() != images_.size()) throw std::invalid_argument("one name per image expected");
  check_images();
}

void DatasetIterator::check_images() {
  if (opts_.patch_size < 1 || opts_.scale < 1 || opts_.patch_size % opts_.scale != 0) {
    throw std::invalid_argument("scale must divide patch_size");
  }
  if (opts_.crops_per_image < 1) throw std::invalid_argument("crops_per_image must be >= 1");
  if (opts_.channels != 1 && opts_.channels != 3) throw std::invalid_argument("channels must be 1 or 3");
  std::vector<Tensor> kept;
  std::vector<std::string> kept_names;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const Tensor& img = images_[i];
    if (img.dim(1) < opts_.patch_size || img.dim(2) < opts_.patch_size) {
      std::cerr << "warning: skipping " << names_[i] << ": smaller than patch " << opts_.patch_size << '\n';
      continue;
    }
    kept.push_back(to_channels(img, opts_.channels));
    kept_names.push_back(names_[i]);
  }
  images_ = std::move(kept);
  names_ = std::move(kept_names);
  if (images_.empty()) throw std::runtime_error("dataset is empty");
  shuffle_epoch();
}

std::int64_t DatasetIterator::epoch_length() const {
  return static_cast<std::int64_t>(images_.size()) * opts_.crops_per_image;
}

void DatasetIterator::shuffle_epoch() {
  order_.resize(static_cast<std::size_t>(epoch_length()));
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::int64_t>(i);
  Rng rng(derive_seed(opts_.seed, 0x5f0cu, static_cast<std::uint64_t>(epoch_)));
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  }
}

void DatasetIterator::seek(int epoch, std::int64_t position) {
  if (epoch < 0 || position < 0 || position > epoch_length()) throw std::out_of_range("bad dataset position");
  epoch_ = epoch;
  pos_ = position;
  shuffle_epoch();
}

Tensor dihedral(const Tensor& img, int k) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const bool transpose = k & 4, flip_x = k & 1, flip_y = k & 2;
  const int oh = transpose ? w : h, ow = transpose ? h : w;
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        int sy = transpose ? x : y, sx = transpose ? y : x;
        if (flip_y) sy = h - 1 - sy;
        if (flip_x) sx = w - 1 - sx;
        out[(static_cast<std::int64_t>(ch) * oh + y) * ow + x] = img[(static_cast<std::int64_t>(ch) * h + sy) * w + sx];
      }
  return out;
}

SamplePair DatasetIterator::next() {
  if (pos_ >= epoch_length()) {
    ++epoch_;
    pos_ = 0;
    shuffle_epoch();
  }
  const std::int64_t item = order_[static_cast<std::size_t>(pos_)];
  const int image = static_cast<int>(item / opts_.crops_per_image);
  Rng rng(derive_seed(opts_.seed, static_cast<std::uint64_t>(epoch_) + 1, static_cast<std::uint64_t>(pos_)));
  ++pos_;
  last_image_ = image;
  const Tensor& src = images_[static_cast<std::size_t>(image)];
  const int p = opts_.patch_size, h = src.dim(1), w = src.dim(2), c = src.dim(0);
  const int top = rng.uniform_int(0, h - p), left = rng.uniform_int(0, w - p);
  Tensor crop({c, p, p});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < p; ++y) {
      const float* row = src.data() + (static_cast<std::int64_t>(ch) * h + top + y) * w + left;
      std::copy(row, row + p, crop.data() + (static_cast<std::int64_t>(ch) * p + y) * p);
    }
  }
  const std::uint64_t plan_seed = rng.next_u64(), noise_seed = rng.next_u64();
  if (opts_.augment) crop = dihedral(crop, rng.uniform_int(0, 7));
  return apply_degradation(unit_to_signed(crop), sample_plan(plan_seed, opts_.profile, opts_.scale, opts_.ranges),
                           noise_seed);
}

std::pair<Tensor, Tensor> DatasetIterator::next_batch(int n) {
  if (n < 1) throw std::invalid_argument("batch size must be >= 1");
  const int c = opts_.channels, p = opts_.patch_size, q = p / opts_.scale;
  Tensor hr({n, c, p, p}), lr({n, c, q, q});
  for (int i = 0; i < n; ++i) {
    SamplePair s = next();
    std::copy(s.hr.data(), s.hr.data() + s.hr.size(), hr.data() + static_cast<std::int64_t>(i) * s.hr.size());
    std::copy(s.lr.data(), s.lr.data() + s.lr.size(), lr.data() + static_cast<std::int64_t>(i) * s.lr.size());
  }
  return {std::move(hr), std::move(lr)};
}

Tensor synthetic_texture(std::uint64_t seed, int size, int channels) {
  if (size < 1 || (channels != 1 && channels != 3)) throw std::invalid_argument("bad texture size or channels");
  Rng rng(seed);
  const int layers = 3;
  std::vector<Tensor> fields;
  for (int l = 0; l < layers; ++l) {
    Tensor f({size, size});
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double freq = rng.uniform(0.04, 0.22);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double kx = std::cos(theta) * freq * 2.0 * std::numbers::pi, ky = std::sin(theta) * freq * 2.0 * std::numbers::pi;
    const bool square = rng.uniform() < 0.5;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double s = std::sin(kx * x + ky * y + phase);
        f[y * size + x] = static_cast<float>(square ? (s >= 0.0 ? 0.5 : -0.5) : 0.5 * s);
      }
    }
    fields.push_back(std::move(f));
  }
  // Hard-edged discs on top.
  Tensor shapes({size, size});
  const int discs = rng.uniform_int(1, 3);
  for (int d = 0; d < discs; ++d) {
    const double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size), r = rng.uniform(0.1, 0.3) * size;
    const float v = static_cast<float>(rng.uniform(-0.6, 0.6));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy) < r * r) shapes[y * size + x] = v;
      }
    }
  }
  Tensor out({channels, size, size});
  for (int ch = 0; ch < channels; ++ch) {
    double mix[layers + 1];
    for (double& m : mix) m = rng.uniform(0.2, 0.6);
    const double base = rng.uniform(0.35, 0.65);
    for (int p = 0; p < size * size; ++p) {
      double v = base + mix[layers] * shapes[p];
      for (int l = 0; l < layers; ++l) v += mix[l] * fields[static_cast<std::size_t>(l)][p] / layers;
      out[static_cast<std::int64_t>(ch) * size * size + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace lddpm
