#include "lddpm/objectives.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace lddpm {

Var ddpm_loss(const Var& eps, const Var& eps_hat) {
  if (eps.shape() != eps_hat.shape()) throw ShapeError("ddpm_loss shape mismatch");
  return ag::mean(ag::square(eps - eps_hat));
}

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed, std::vector<int> widths, int convs_per_block) {
  Rng rng(seed);
  int in = 3;
  for (int w : widths) {
    std::vector<Layer> block;
    for (int c = 0; c < convs_per_block; ++c) {
      Tensor weight = rng.normal_tensor({w, in, 3, 3});
      const auto std_dev = static_cast<float>(std::sqrt(2.0 / (in * 9)));
      for (float& v : weight.values()) v *= std_dev;
      block.push_back({std::move(weight), Tensor({w}, 0.0f)});
      in = w;
    }
    blocks_.push_back(std::move(block));
  }
}

PerceptualExtractor::PerceptualExtractor(std::vector<std::vector<Layer>> blocks, bool relu)
    : blocks_(std::move(blocks)), relu_(relu) {
  int in = -1;
  for (const auto& b : blocks_) {
    for (const auto& l : b) {
      if (l.weight.rank() != 4 || l.bias.size() != l.weight.dim(0) || (in >= 0 && l.weight.dim(1) != in)) {
        throw ShapeError("inconsistent perceptual extractor layers");
      }
      in = l.weight.dim(0);
    }
  }
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated extractor weight file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_floats(std::ostream& os, const Tensor& t) {
  for (float f : t.values()) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32(os, u);
  }
}

Tensor read_floats(std::istream& is, Shape shape) {
  Tensor t(std::move(shape));
  for (float& f : t.values()) {
    const std::uint32_t u = read_u32(is);
    std::memcpy(&f, &u, 4);
  }
  return t;
}

}  // namespace

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open extractor weights " + path.string());
  const std::uint32_t nb = read_u32(is);
  if (nb == 0 || nb > 64) throw std::runtime_error("bad block count in " + path.string());
  std::vector<std::vector<Layer>> blocks(nb);
  for (auto& b : blocks) {
    const std::uint32_t nc = read_u32(is);
    if (nc == 0 || nc > 64) throw std::runtime_error("bad conv count in " + path.string());
    for (std::uint32_t c = 0; c < nc; ++c) {
      Shape s(4);
      for (int& d : s) {
        d = static_cast<int>(read_u32(is));
        if (d <= 0 || d > 4096) throw std::runtime_error("bad layer shape in " + path.string());
      }
      Tensor w = read_floats(is, s);
      Tensor bias = read_floats(is, {s[0]});
      b.push_back({std::move(w), std::move(bias)});
    }
  }
  return PerceptualExtractor(std::move(blocks), true);
}

void PerceptualExtractor::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_u32(os, static_cast<std::uint32_t>(blocks_.size()));
  for (const auto& b : blocks_) {
    write_u32(os, static_cast<std::uint32_t>(b.size()));
    for (const auto& l : b) {
      for (int d : l.weight.shape()) write_u32(os, static_cast<std::uint32_t>(d));
      write_floats(os, l.weight);
      write_floats(os, l.bias);
    }
  }
}

bool PerceptualExtractor::has_tap(Tap tap) const {
  return tap.block >= 1 && tap.block <= blocks() && tap.conv >= 1 &&
         tap.conv <= static_cast<int>(blocks_[static_cast<std::size_t>(tap.block - 1)].size());
}

Var PerceptualExtractor::features(const Var& image, Tap tap) const {
  if (!has_tap(tap)) {
    throw std::invalid_argument("extractor has no tap (" + std::to_string(tap.block) + "," + std::to_string(tap.conv) +
                                ")");
  }
  const int in_ch = blocks_[0][0].weight.dim(1);
  Var h = ag::add_scalar(image * 0.5f, 0.5f);
  if (h.dim(1) == 1 && in_ch == 3) h = ag::concat({h, h, h}, 1);
  if (h.dim(1) != in_ch) throw ShapeError("extractor expects " + std::to_string(in_ch) + " channels");
  for (int b = 0; b < tap.block; ++b) {
    if (b > 0) h = ag::avg_pool(h, 2);
    const auto& block = blocks_[static_cast<std::size_t>(b)];
    const int last = b + 1 == tap.block ? tap.conv : static_cast<int>(block.size());
    for (int c = 0; c < last; ++c) {
      const Layer& l = block[static_cast<std::size_t>(c)];
      h = ag::conv2d(h, ag::constant(l.weight), ag::constant(l.bias), 1, l.weight.dim(2) / 2);
      if (relu_) h = ag::relu(h);
    }
  }
  return h;
}

Var content_feature_term(const Var& fa, const Var& fb) {
  if (fa.shape() != fb.shape()) throw ShapeError("feature shape mismatch");
  return ag::mean(ag::square(fa - fb));
}

Var style_from_features(const Var& fa, const Var& fb) {
  if (fa.shape() != fb.shape()) throw ShapeError("feature shape mismatch");
  auto stats = [](const Var& f) {
    Var mu = ag::mean(f, {2, 3}, true);
    Var var = ag::mean(ag::square(f - mu), {2, 3}, true);
    return std::make_pair(mu, ag::sqrt(ag::add_scalar(var, 1e-5f)));
  };
  auto [ma, sa] = stats(fa);
  auto [mb, sb] = stats(fb);
  return ag::mean(ag::square(ma - mb)) + ag::mean(ag::square(sa - sb));
}

Var content_loss(const Var& x_i, const Var& x_i_hat, const Var& y, const Var& y_hat,
                 const PerceptualExtractor& extractor, Tap tap, L1Mode l1) {
  if (y.shape() != y_hat.shape()) throw ShapeError("content_loss: y / y_hat shape mismatch");
  Var feat = content_feature_term(extractor.features(x_i, tap), extractor.features(x_i_hat, tap));
  Var diff = ag::abs(y - y_hat);
  Var l1_term = l1 == L1Mode::mean ? ag::mean(diff) : ag::sum(diff) * (1.0f / static_cast<float>(y.dim(0)));
  return feat + l1_term;
}

Var style_loss(const Var& x_i, const Var& x_i_hat, const PerceptualExtractor& extractor, Tap tap) {
  return style_from_features(extractor.features(x_i, tap), extractor.features(x_i_hat, tap));
}

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights) {
  TotalLoss out;
  out.breakdown.weights = weights;
  auto take = [](const char* name, const Var& v, double& slot) {
    if (!v.defined()) return;
    slot = v.item();
    if (!std::isfinite(slot)) throw NonFiniteLossError(std::string("loss term '") + name + "' is not finite");
  };
  LossBreakdown& b = out.breakdown;
  take("ddpm", terms.ddpm, b.ddpm);
  take("kl", terms.kl, b.kl);
  take("adv_g", terms.adv_g, b.adv_g);
  take("adv_d", terms.adv_d, b.adv_d);
  take("content", terms.content, b.content);
  take("style", terms.style, b.style);
  take("flow", terms.flow, b.flow_nll);

  Var total = ag::constant(Tensor::scalar(0.0f));
  auto add = [&](const Var& v, double w) {
    if (v.defined() && w != 0.0) total = total + ag::reshape(v, {1}) * static_cast<float>(w);
  };
  add(terms.ddpm, weights.ddpm);
  add(terms.kl, weights.kl);
  add(terms.adv_g, weights.adv);
  add(terms.content, weights.content);
  add(terms.style, weights.style);
  add(terms.flow, weights.flow);
  out.total = total;
  b.total = total.item();
  if (!std::isfinite(b.total)) throw NonFiniteLossError("total loss is not finite");
  return out;
}

}  // namespace lddpm
