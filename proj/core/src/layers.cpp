#include "caps/layers.hpp"

#include <cmath>

#include "gemm.hpp"

namespace caps {

std::size_t parameter_count(const ParameterList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.size();
  return total;
}

LinearLayer LinearLayer::create(std::size_t in_features, std::size_t out_features, Rng& rng) {
  if (in_features == 0 || out_features == 0) throw ShapeError("linear layer extents must be positive");
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_features));
  LinearLayer layer;
  layer.in_features = in_features;
  layer.out_features = out_features;
  layer.weights = Tensor::uniform({out_features, in_features}, -bound, bound, rng, true);
  layer.bias = Tensor::uniform({out_features}, -bound, bound, rng, true);
  return layer;
}

void LinearLayer::append_parameters(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weights});
  out.push_back({prefix + ".bias", bias});
}

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
  const Shape& s = x.shape();
  const bool batched = s.size() == 2;
  if ((s.size() != 1 && !batched) || s.back() != layer.in_features) {
    throw ShapeError("linear: input " + to_string(s) + " does not match in_features " +
                     std::to_string(layer.in_features));
  }
  const std::size_t rows = batched ? s[0] : 1;
  const std::size_t in = layer.in_features;
  const std::size_t out = layer.out_features;
  std::vector<float> y(rows * out);
  const auto bv = layer.bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), y.begin() + r * out);
  detail::gemm(false, true, rows, out, in, x.data().data(), layer.weights.data().data(), y.data(), true);

  Shape shape = batched ? Shape{rows, out} : Shape{out};
  const Tensor w = layer.weights;
  const Tensor b = layer.bias;
  return make_op_result(std::move(shape), std::move(y), {x, w, b}, [x, w, b, rows, in, out](auto g, auto) {
    if (needs_grad(x)) detail::gemm(false, false, rows, in, out, g.data(), w.data().data(), grad_sink(x).data(), true);
    if (needs_grad(w)) detail::gemm(true, false, out, in, rows, g.data(), x.data().data(), grad_sink(w).data(), true);
    if (needs_grad(b)) {
      auto gb = grad_sink(b);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
      }
    }
  });
}

Conv2dLayer Conv2dLayer::create(const ConvSpec& spec, Rng& rng) {
  const std::size_t fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
  if (fan_in == 0 || spec.out_channels == 0) throw ShapeError("conv layer extents must be positive");
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  Conv2dLayer layer;
  layer.spec = spec;
  layer.weights = Tensor::uniform({spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}, -bound,
                                  bound, rng, true);
  layer.bias = Tensor::uniform({spec.out_channels}, -bound, bound, rng, true);
  return layer;
}

void Conv2dLayer::append_parameters(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weights});
  out.push_back({prefix + ".bias", bias});
}

Tensor conv_forward(const Conv2dLayer& layer, const Tensor& x) {
  return conv2d(x, layer.weights, layer.bias, layer.spec);
}

std::size_t PoolSpec::out_extent(std::size_t in) const {
  if (window == 0 || stride == 0) throw ShapeError("pool: window and stride must be positive");
  if (window > in) {
    throw ShapeError("pool: window " + std::to_string(window) + " larger than input " + std::to_string(in));
  }
  return (in - window) / stride + 1;
}

Tensor pool2d(const Tensor& x, const PoolSpec& spec) {
  const Shape& s = x.shape();
  if (s.size() != 3 && s.size() != 4) throw ShapeError("pool2d: input must be [C,H,W] or [B,C,H,W]");
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  const std::size_t planes = x.size() / (h * w);
  const std::size_t oh = spec.out_extent(h);
  const std::size_t ow = spec.out_extent(w);

  const auto in = x.data();
  std::vector<float> out(planes * oh * ow);
  // For max pooling, the flat input index feeding each output.
  auto source = std::make_shared<std::vector<std::size_t>>();
  if (spec.kind == PoolKind::kMax) source->resize(out.size());
  const float inv_area = 1.0f / static_cast<float>(spec.window * spec.window);

  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (p * oh + oy) * ow + ox;
        const std::size_t first = (p * h + oy * spec.stride) * w + ox * spec.stride;
        if (spec.kind == PoolKind::kMax) {
          std::size_t best = first;
          for (std::size_t ky = 0; ky < spec.window; ++ky) {
            for (std::size_t kx = 0; kx < spec.window; ++kx) {
              const std::size_t idx = first + ky * w + kx;
              if (!std::isnan(in[best]) && !(in[idx] <= in[best])) best = idx;  // NaN wins and sticks
            }
          }
          out[o] = in[best];
          (*source)[o] = best;
        } else {
          float acc = 0.0f;
          for (std::size_t ky = 0; ky < spec.window; ++ky) {
            for (std::size_t kx = 0; kx < spec.window; ++kx) acc += in[first + ky * w + kx];
          }
          out[o] = acc * inv_area;
        }
      }
    }
  }

  Shape shape = s;
  shape[s.size() - 2] = oh;
  shape[s.size() - 1] = ow;
  return make_op_result(std::move(shape), std::move(out), {x},
                        [x, spec, source, planes, h, w, oh, ow, inv_area](auto g, auto) {
    auto gx = grad_sink(x);
    if (spec.kind == PoolKind::kMax) {
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*source)[o]] += g[o];
      return;
    }
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const float share = g[(p * oh + oy) * ow + ox] * inv_area;
          const std::size_t first = (p * h + oy * spec.stride) * w + ox * spec.stride;
          for (std::size_t ky = 0; ky < spec.window; ++ky) {
            for (std::size_t kx = 0; kx < spec.window; ++kx) gx[first + ky * w + kx] += share;
          }
        }
      }
    }
  });
}

}  // namespace caps
