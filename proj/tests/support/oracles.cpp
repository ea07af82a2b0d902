#include "oracles.hpp"

#include <cstdio>

namespace oracle {
namespace {

using sdcs::BasicLayerParams;
using sdcs::LayerKind;

std::string shape_name(const char* layer, Shape s) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s %dx%dx%dx%d", layer, s.n, s.c, s.h, s.w);
  return buf;
}

std::span<double> flat(std::vector<double>& v) { return v; }

// Concatenates the analytic and numeric gradients of several parameter
// blocks and compares them as one vector.
struct Accumulator {
  std::vector<double> analytic;
  std::vector<double> numeric;
  void add(std::span<const double> a, const std::vector<double>& n) {
    analytic.insert(analytic.end(), a.begin(), a.end());
    numeric.insert(numeric.end(), n.begin(), n.end());
  }
  double error() const { return relative_error(analytic, numeric); }
};

GradCase conv_case(LayerKind kind, Shape s, int out, std::mt19937_64& rng) {
  TensorD x = random_tensor(s, rng);
  auto p = random_conv(kind, s.c, out, rng);
  const TensorD r = random_tensor({s.n, out, s.h, s.w}, rng);
  auto f = [&] { return dot(sdcs::conv_forward(x, p), r); };
  const auto g = sdcs::conv_backward(x, p, r);
  Accumulator acc;
  acc.add(g.input_grad.data(), numeric_gradient(f, x.data()));
  acc.add(g.weight_grad.data(), numeric_gradient(f, p.weights.data()));
  acc.add(g.bias_grad, numeric_gradient(f, flat(p.bias)));
  return {shape_name(kind == LayerKind::kConv3x3 ? "conv3x3" : "conv1x1", s), acc.error()};
}

GradCase pool_case(Shape s, std::mt19937_64& rng) {
  TensorD x = random_distinct(s, rng, 0.01);
  const TensorD r = random_tensor({s.n, s.c, s.h / 2, s.w / 2}, rng);
  auto f = [&] { return dot(sdcs::maxpool2x2(x).output, r); };
  const auto fwd = sdcs::maxpool2x2(x);
  const TensorD g = sdcs::maxpool2x2_backward(s, fwd.argmax, r);
  return {shape_name("maxpool", s), relative_error(g.data(), numeric_gradient(f, x.data()))};
}

GradCase relu_case(Shape s, std::mt19937_64& rng) {
  TensorD x = random_away_from_zero(s, rng, 0.01);
  const TensorD r = random_tensor(s, rng);
  auto f = [&] { return dot(sdcs::relu_forward(x), r); };
  const TensorD g = sdcs::relu_backward(sdcs::relu_forward(x), r);
  return {shape_name("relu", s), relative_error(g.data(), numeric_gradient(f, x.data()))};
}

GradCase upsample_case(Shape s, int oh, int ow, std::mt19937_64& rng) {
  TensorD x = random_tensor(s, rng);
  const TensorD r = random_tensor({s.n, s.c, oh, ow}, rng);
  auto f = [&] { return dot(sdcs::upsample_bilinear(x, oh, ow), r); };
  const TensorD g = sdcs::upsample_bilinear_backward(r, s);
  return {shape_name("upsample", s), relative_error(g.data(), numeric_gradient(f, x.data()))};
}

GradCase softmax_case(Shape s, std::mt19937_64& rng) {
  TensorD x = random_tensor(s, rng, -3.0, 3.0);
  const TensorD r = random_tensor(s, rng);
  auto f = [&] { return dot(sdcs::softmax_channels(x), r); };
  const TensorD g = sdcs::softmax_backward(sdcs::softmax_channels(x), r);
  return {shape_name("softmax", s), relative_error(g.data(), numeric_gradient(f, x.data()))};
}

GradCase gap_case(Shape s, bool weighted, std::mt19937_64& rng) {
  TensorD x = random_tensor(s, rng);
  std::vector<double> w;
  if (weighted) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    w.resize(s.plane());
    double sum = 0.0;
    for (double& v : w) sum += (v = u(rng));
    for (double& v : w) v /= sum;
  }
  const TensorD r = random_tensor({s.n, s.c, 1, 1}, rng);
  auto f = [&] { return dot(sdcs::global_avg_pool<double>(x, w), r); };
  const TensorD g = sdcs::global_avg_pool_backward<double>(r, s, w);
  return {shape_name(weighted ? "weighted-gap" : "gap", s),
          relative_error(g.data(), numeric_gradient(f, x.data()))};
}

GradCase concat_case(Shape a, int cb, std::mt19937_64& rng) {
  TensorD x = random_tensor(a, rng);
  TensorD y = random_tensor({a.n, cb, a.h, a.w}, rng);
  const TensorD r = random_tensor({a.n, a.c + cb, a.h, a.w}, rng);
  auto f = [&] { return dot(sdcs::concat_channels<double>({&x, &y}), r); };
  const auto parts = sdcs::split_channels(r, {a.c, cb});
  Accumulator acc;
  acc.add(parts[0].data(), numeric_gradient(f, x.data()));
  acc.add(parts[1].data(), numeric_gradient(f, y.data()));
  return {shape_name("concat", a), acc.error()};
}

double min_abs(const TensorD& t) {
  double m = 1e300;
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

// Smallest gap between the winner and runner-up of any 2x2 window.
double min_pool_gap(const TensorD& t) {
  const Shape s = t.shape();
  double m = 1e300;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; y += 2)
        for (int x = 0; x < s.w; x += 2) {
          std::array<double, 4> v = {t.at(n, c, y, x), t.at(n, c, y, x + 1), t.at(n, c, y + 1, x),
                                     t.at(n, c, y + 1, x + 1)};
          std::sort(v.begin(), v.end());
          m = std::min(m, v[3] - v[2]);
        }
  return m;
}

// Two-block hypercolumn network with a two-layer 1x1 head and pixel
// cross-entropy on a handful of labelled pixels. Draws whose activations sit
// near a ReLU or max-pool kink are redrawn.
GradCase composite_case(Shape s, std::mt19937_64& rng) {
  constexpr double kKinkMargin = 2.5e-3;
  TensorD x;
  BasicLayerParams<double> c1, c2, h1, h2;
  for (;;) {
    x = random_tensor(s, rng);
    c1 = random_conv(LayerKind::kConv3x3, s.c, 4, rng);
    c2 = random_conv(LayerKind::kConv3x3, 4, 4, rng);
    h1 = random_conv(LayerKind::kConv1x1, 8, 6, rng);
    h2 = random_conv(LayerKind::kConv1x1, 6, 3, rng);
    const TensorD pre1 = sdcs::conv_forward(x, c1);
    const TensorD a1 = sdcs::relu_forward(pre1);
    const TensorD p1 = sdcs::maxpool2x2(a1).output;
    const TensorD pre2 = sdcs::conv_forward(p1, c2);
    const TensorD a2 = sdcs::relu_forward(pre2);
    const TensorD up = sdcs::upsample_bilinear(a2, s.h, s.w);
    const TensorD pre3 = sdcs::conv_forward(sdcs::concat_channels<double>({&a1, &up}), h1);
    if (min_abs(pre1) > kKinkMargin && min_abs(pre2) > kKinkMargin && min_abs(pre3) > kKinkMargin &&
        min_pool_gap(a1) > kKinkMargin) {
      break;
    }
  }
  std::uniform_int_distribution<int> py(0, s.h - 1), px(0, s.w - 1), pc(0, 2);
  struct Px {
    int y, x, c;
  };
  std::vector<Px> picks;
  for (int i = 0; i < 6; ++i) picks.push_back({py(rng), px(rng), pc(rng)});

  struct Fwd {
    TensorD a1, p1, a2, up, cat, z1, z2, probs;
    std::vector<std::uint32_t> argmax;
    double loss = 0.0;
  };
  auto forward = [&] {
    Fwd f;
    f.a1 = sdcs::relu_forward(sdcs::conv_forward(x, c1));
    auto pool = sdcs::maxpool2x2(f.a1);
    f.p1 = pool.output;
    f.argmax = pool.argmax;
    f.a2 = sdcs::relu_forward(sdcs::conv_forward(f.p1, c2));
    f.up = sdcs::upsample_bilinear(f.a2, s.h, s.w);
    f.cat = sdcs::concat_channels<double>({&f.a1, &f.up});
    f.z1 = sdcs::relu_forward(sdcs::conv_forward(f.cat, h1));
    f.z2 = sdcs::conv_forward(f.z1, h2);
    f.probs = sdcs::softmax_channels(f.z2);
    for (const Px& p : picks) f.loss -= std::log(f.probs.at(0, p.c, p.y, p.x));
    return f;
  };

  const Fwd f = forward();
  TensorD dp(f.probs.shape());
  for (const Px& p : picks) dp.at(0, p.c, p.y, p.x) -= 1.0 / f.probs.at(0, p.c, p.y, p.x);
  const TensorD dz2 = sdcs::softmax_backward(f.probs, dp);
  const auto gh2 = sdcs::conv_backward(f.z1, h2, dz2);
  const TensorD dz1 = sdcs::relu_backward(f.z1, gh2.input_grad);
  const auto gh1 = sdcs::conv_backward(f.cat, h1, dz1);
  const auto parts = sdcs::split_channels(gh1.input_grad, {4, 4});
  const TensorD dup = sdcs::upsample_bilinear_backward(parts[1], f.a2.shape());
  const TensorD da2 = sdcs::relu_backward(f.a2, dup);
  const auto gc2 = sdcs::conv_backward(f.p1, c2, da2);
  TensorD da1 = sdcs::maxpool2x2_backward(f.a1.shape(), f.argmax, gc2.input_grad);
  for (std::size_t i = 0; i < da1.size(); ++i) da1.data()[i] += parts[0].data()[i];
  const TensorD dr1 = sdcs::relu_backward(f.a1, da1);
  const auto gc1 = sdcs::conv_backward(x, c1, dr1);

  auto loss = [&] { return forward().loss; };
  Accumulator acc;
  acc.add(gc1.input_grad.data(), numeric_gradient(loss, x.data()));
  acc.add(gc1.weight_grad.data(), numeric_gradient(loss, c1.weights.data()));
  acc.add(gc1.bias_grad, numeric_gradient(loss, flat(c1.bias)));
  acc.add(gc2.weight_grad.data(), numeric_gradient(loss, c2.weights.data()));
  acc.add(gh1.weight_grad.data(), numeric_gradient(loss, h1.weights.data()));
  acc.add(gh2.weight_grad.data(), numeric_gradient(loss, h2.weights.data()));
  acc.add(gh2.bias_grad, numeric_gradient(loss, flat(h2.bias)));
  return {shape_name("hypercolumn-net", s), acc.error()};
}

}  // namespace

BasicLayerParams<double> random_conv(LayerKind kind, int in, int out, std::mt19937_64& rng) {
  const int k = sdcs::kernel_size(kind);
  BasicLayerParams<double> p;
  p.kind = kind;
  p.weights = random_tensor({out, in, k, k}, rng, -0.5, 0.5);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  p.bias.resize(out);
  for (double& b : p.bias) b = u(rng);
  return p;
}

std::vector<GradCase> gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(1, 3), side(3, 7);
  std::vector<GradCase> out;
  out.push_back(conv_case(LayerKind::kConv3x3, {1, 2, 5, 5}, 1, rng));
  for (int i = 0; i < 3; ++i) {
    out.push_back(conv_case(LayerKind::kConv3x3, {small(rng), small(rng), side(rng), side(rng)}, small(rng), rng));
  }
  for (int i = 0; i < 3; ++i) {
    out.push_back(conv_case(LayerKind::kConv1x1, {small(rng), small(rng), side(rng), side(rng)}, small(rng), rng));
  }
  for (int i = 0; i < 3; ++i) {
    out.push_back(pool_case({small(rng), small(rng), 2 * small(rng), 2 * side(rng)}, rng));
  }
  for (int i = 0; i < 2; ++i) out.push_back(relu_case({small(rng), small(rng), side(rng), side(rng)}, rng));
  out.push_back(upsample_case({1, 1, 2, 2}, 3, 3, rng));
  for (int i = 0; i < 2; ++i) {
    const int h = small(rng) + 1, w = small(rng) + 1;
    out.push_back(upsample_case({small(rng), small(rng), h, w}, h + side(rng), w * 2 + 1, rng));
  }
  for (int i = 0; i < 2; ++i) out.push_back(softmax_case({small(rng), small(rng) + 1, side(rng), side(rng)}, rng));
  out.push_back(gap_case({small(rng), small(rng), side(rng), side(rng)}, false, rng));
  out.push_back(gap_case({small(rng), small(rng), side(rng), side(rng)}, true, rng));
  out.push_back(concat_case({small(rng), small(rng), side(rng), side(rng)}, small(rng), rng));
  out.push_back(composite_case({1, 3, 8, 8}, rng));
  out.push_back(composite_case({1, 2, 6, 10}, rng));
  return out;
}

}  // namespace oracle
