#include "lddpm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "lddpm/image_io.hpp"

namespace lddpm {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape() || a.rank() != 3) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak, double cap) {
  check_pair(a, b, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr peak must be positive");
  double se = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    se += d * d;
  }
  if (se == 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(peak * peak / (se / static_cast<double>(a.size()))));
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& o) {
  check_pair(a, b, "ssim");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2), k = o.window;
  if (h < k || w < k) {
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than " +
                                std::to_string(k) + "x" + std::to_string(k) + " window");
  }
  std::vector<double> g(static_cast<std::size_t>(k));
  double gs = 0.0;
  for (int i = 0; i < k; ++i) {
    const double x = i - (k - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * o.sigma * o.sigma));
    gs += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= gs;
  const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
  const int oh = h - k + 1, ow = w - k + 1;

  // Separable valid filtering of x, y, x^2, y^2, xy.
  auto filter = [&](const std::vector<double>& img) {
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < k; ++i) s += g[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y) * w + x + i];
        tmp[static_cast<std::size_t>(y) * ow + x] = s;
      }
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < k; ++i) s += g[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    return out;
  };

  double total = 0.0;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
    for (std::size_t p = 0; p < hw; ++p) {
      x[p] = a[static_cast<std::int64_t>(ch * hw + p)];
      y[p] = b[static_cast<std::int64_t>(ch * hw + p)];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    double sum = 0.0;
    for (std::size_t p = 0; p < mx.size(); ++p) {
      const double vx = sxx[p] - mx[p] * mx[p], vy = syy[p] - my[p] * my[p], cov = sxy[p] - mx[p] * my[p];
      sum += ((2.0 * mx[p] * my[p] + c1) * (2.0 * cov + c2)) /
             ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / c;
}

std::array<std::int64_t, 256> gray_histogram(const Tensor& image) {
  check_image(image, "gray_histogram");
  std::array<std::int64_t, 256> h{};
  const int hw = image.dim(1) * image.dim(2);
  for (int p = 0; p < hw; ++p) {
    double v = image[p];
    if (image.dim(0) == 3) v = 0.299 * image[p] + 0.587 * image[hw + p] + 0.114 * image[2 * hw + p];
    ++h[static_cast<std::size_t>(std::clamp(std::lround(v), 0L, 255L))];
  }
  return h;
}

Tensor to_8bit_scale(const Tensor& unit_image) {
  Tensor out = unit_image;
  for (float& v : out.values()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  return out;
}

MetricReport summarize(std::vector<ImageMetrics> per_image) {
  MetricReport r;
  for (const auto& m : per_image) {
    r.psnr_db += m.psnr;
    r.ssim_percent += m.ssim;
  }
  if (!per_image.empty()) {
    r.psnr_db /= static_cast<double>(per_image.size());
    r.ssim_percent = 100.0 * r.ssim_percent / static_cast<double>(per_image.size());
  }
  r.per_image = std::move(per_image);
  return r;
}

namespace {

std::set<std::string> png_names(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.insert(fs::relative(e.path(), dir).string());
  }
  return out;
}

}  // namespace

MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& ref,
                           const EvalOptions& opts) {
  const auto p = png_names(pred), r = png_names(ref);
  std::vector<std::string> missing;
  for (const auto& n : p)
    if (!r.count(n)) missing.push_back("reference missing for " + n);
  for (const auto& n : r)
    if (!p.count(n)) missing.push_back("prediction missing for " + n);
  if (!missing.empty()) {
    std::string msg = "unmatched files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw UnmatchedFilesError(msg);
  }
  if (p.empty()) throw std::runtime_error("no images to evaluate in " + pred.string());
  std::vector<ImageMetrics> per;
  std::array<std::int64_t, 256> hist{};
  for (const auto& n : p) {
    Tensor a = to_8bit_scale(read_png(pred / n)), b = to_8bit_scale(read_png(ref / n));
    if (a.dim(0) != b.dim(0)) {
      a = to_8bit_scale(read_png(pred / n, 3));
      b = to_8bit_scale(read_png(ref / n, 3));
    }
    if (opts.histogram) {
      const auto h = gray_histogram(a);
      for (std::size_t i = 0; i < 256; ++i) hist[i] += h[i];
    }
    if (opts.y_only) {
      a = luma(a);
      b = luma(b);
    }
    per.push_back({n, psnr(a, b, 255.0, opts.cap), ssim(a, b)});
  }
  MetricReport rep = summarize(std::move(per));
  if (opts.histogram) rep.histogram = hist;
  return rep;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  std::size_t width = 5;
  for (const auto& m : r.per_image) width = std::max(width, m.name.size());
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size() + 2, ' '); };
  os << pad("image") << "psnr_db    ssim\n";
  for (const auto& m : r.per_image) os << pad(m.name) << m.psnr << "  " << m.ssim << '\n';
  os << pad("mean") << r.psnr_db << "  " << r.ssim_percent / 100.0 << "  (" << r.ssim_percent << "%)\n";
  return os.str();
}

void write_report_tsv(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  for (const auto& m : r.per_image) os << m.name << '\t' << m.psnr << '\t' << m.ssim << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, const std::array<std::int64_t, 256>& h) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? "," : "") << h[i];
  os << '\n';
}

}  // namespace lddpm
