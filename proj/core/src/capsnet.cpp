#include "caps/capsnet.hpp"

#include <chrono>
#include <cmath>

namespace caps {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

void require_positive(std::size_t value, const char* name) {
  if (value == 0) throw ContractError(std::string("capsnet config: ") + name + " must be positive");
}

// s [B, N_PC, N_class, D] x c [B, N_PC, N_class] -> [B, N_class, D]; c is a constant.
Tensor coupled_sum(const Tensor& votes, std::shared_ptr<const std::vector<float>> coupling, std::size_t batch,
                   std::size_t n_in, std::size_t n_out, std::size_t dim) {
  const auto u = votes.data();
  std::vector<float> s(batch * n_out * dim, 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n_in; ++i) {
      for (std::size_t j = 0; j < n_out; ++j) {
        const float c = (*coupling)[(b * n_in + i) * n_out + j];
        const float* src = u.data() + ((b * n_in + i) * n_out + j) * dim;
        float* dst = s.data() + (b * n_out + j) * dim;
        for (std::size_t d = 0; d < dim; ++d) dst[d] += c * src[d];
      }
    }
  }
  return make_op_result({batch, n_out, dim}, std::move(s), {votes},
                        [votes, coupling, batch, n_in, n_out, dim](auto g, auto) {
    auto gu = grad_sink(votes);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n_in; ++i) {
        for (std::size_t j = 0; j < n_out; ++j) {
          const float c = (*coupling)[(b * n_in + i) * n_out + j];
          const float* gs = g.data() + (b * n_out + j) * dim;
          float* dst = gu.data() + ((b * n_in + i) * n_out + j) * dim;
          for (std::size_t d = 0; d < dim; ++d) dst[d] += c * gs[d];
        }
      }
    }
  });
}

// In-place squash of a single vector.
void squash_vector(float* v, std::size_t dim) {
  float sq = 0.0f;
  for (std::size_t d = 0; d < dim; ++d) sq += v[d] * v[d];
  if (sq == 0.0f) return;
  const float norm = std::sqrt(sq);
  const float factor = norm / (1.0f + sq);
  for (std::size_t d = 0; d < dim; ++d) v[d] *= factor;
}

}  // namespace

// ---- config ---------------------------------------------------------------------

ConvSpec CapsNetConfig::stem_spec() const {
  return ConvSpec{input_channels, stem_channels, stem_kernel, stem_kernel, stem_stride, stem_padding};
}

ConvSpec CapsNetConfig::primary_spec() const {
  return ConvSpec{stem_channels, primary.channels * primary.capsule_dim, primary.kernel, primary.kernel,
                  primary.stride, primary.padding};
}

std::size_t CapsNetConfig::stem_side() const { return stem_spec().out_height(input_side); }

std::size_t CapsNetConfig::primary_side() const { return primary_spec().out_height(stem_side()); }

std::size_t CapsNetConfig::n_primary() const {
  const std::size_t side = primary_side();
  return primary.channels * side * side;
}

void CapsNetConfig::validate() const {
  require_positive(input_side, "input_side");
  require_positive(input_channels, "input_channels");
  require_positive(stem_channels, "stem_channels");
  require_positive(stem_kernel, "stem_kernel");
  require_positive(stem_stride, "stem_stride");
  require_positive(primary.channels, "primary.channels");
  require_positive(primary.capsule_dim, "primary.capsule_dim");
  require_positive(primary.kernel, "primary.kernel");
  require_positive(primary.stride, "primary.stride");
  require_positive(n_class, "n_class");
  require_positive(digit_dim, "digit_dim");
  require_positive(routing_iterations, "routing_iterations");
  for (auto h : decoder_hidden) require_positive(h, "decoder_hidden");
  (void)n_primary();  // throws ShapeError if the kernels do not fit
}

// ---- capsule primitives ------------------------------------------------------------

Tensor squash(const Tensor& s) {
  if (s.rank() == 0) throw ShapeError("squash: input needs at least one axis");
  const std::size_t dim = s.dim(s.rank() - 1);
  const std::size_t rows = s.size() / dim;
  std::vector<float> out(s.data().begin(), s.data().end());
  for (std::size_t r = 0; r < rows; ++r) squash_vector(out.data() + r * dim, dim);
  return make_op_result(s.shape(), std::move(out), {s}, [s, dim, rows](auto g, auto) {
    auto gs = grad_sink(s);
    const auto in = s.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* x = in.data() + r * dim;
      const float* gv = g.data() + r * dim;
      float sq = 0.0f;
      float dot = 0.0f;
      for (std::size_t d = 0; d < dim; ++d) {
        sq += x[d] * x[d];
        dot += x[d] * gv[d];
      }
      if (sq == 0.0f) continue;
      // v = f(n) s with f(n) = n / (1 + n^2); df/dn = (1 - n^2) / (1 + n^2)^2.
      const float norm = std::sqrt(sq);
      const float denom = 1.0f + sq;
      const float f = norm / denom;
      const float radial = (1.0f - sq) / (denom * denom) / norm * dot;
      float* dst = gs.data() + r * dim;
      for (std::size_t d = 0; d < dim; ++d) dst[d] += f * gv[d] + radial * x[d];
    }
  });
}

CapsuleBlock squash(const CapsuleBlock& s) { return CapsuleBlock{squash(s.values)}; }

VoteTensor compute_votes(const CapsuleBlock& u, const Tensor& weights) {
  const Shape& us = u.values.shape();
  if (us.size() != 2 && us.size() != 3) throw ShapeError("compute_votes: capsules must be [N,D] or [B,N,D]");
  const bool batched = us.size() == 3;
  const std::size_t batch = batched ? us[0] : 1;
  const std::size_t n_in = us[us.size() - 2];
  const std::size_t d_in = us[us.size() - 1];
  const Shape& ws = weights.shape();
  if (ws.size() != 4 || ws[0] != n_in || ws[2] != d_in) {
    throw ShapeError("compute_votes: weights " + to_string(ws) + " incompatible with capsules " + to_string(us));
  }
  const std::size_t n_out = ws[1];
  const std::size_t d_out = ws[3];

  const auto uv = u.values.data();
  const auto wv = weights.data();
  std::vector<float> out(batch * n_in * n_out * d_out, 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n_in; ++i) {
      const float* ui = uv.data() + (b * n_in + i) * d_in;
      for (std::size_t j = 0; j < n_out; ++j) {
        const float* wij = wv.data() + (i * n_out + j) * d_in * d_out;
        float* dst = out.data() + ((b * n_in + i) * n_out + j) * d_out;
        for (std::size_t p = 0; p < d_in; ++p) {
          const float up = ui[p];
          const float* row = wij + p * d_out;
          for (std::size_t d = 0; d < d_out; ++d) dst[d] += up * row[d];
        }
      }
    }
  }

  Shape shape = batched ? Shape{batch, n_in, n_out, d_out} : Shape{n_in, n_out, d_out};
  const Tensor values = u.values;
  Tensor result = make_op_result(std::move(shape), std::move(out), {values, weights},
                                 [values, weights, batch, n_in, n_out, d_in, d_out](auto g, auto) {
    const auto uv = values.data();
    const auto wv = weights.data();
    const bool want_u = needs_grad(values);
    const bool want_w = needs_grad(weights);
    const std::span<float> gw_all = want_w ? grad_sink(weights) : std::span<float>{};
    const std::span<float> gu_all = want_u ? grad_sink(values) : std::span<float>{};
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n_in; ++i) {
        const float* ui = uv.data() + (b * n_in + i) * d_in;
        for (std::size_t j = 0; j < n_out; ++j) {
          const float* gij = g.data() + ((b * n_in + i) * n_out + j) * d_out;
          const std::size_t wbase = (i * n_out + j) * d_in * d_out;
          for (std::size_t p = 0; p < d_in; ++p) {
            if (want_w) {
              float* gw = gw_all.data() + wbase + p * d_out;
              for (std::size_t d = 0; d < d_out; ++d) gw[d] += ui[p] * gij[d];
            }
            if (want_u) {
              const float* row = wv.data() + wbase + p * d_out;
              float acc = 0.0f;
              for (std::size_t d = 0; d < d_out; ++d) acc += row[d] * gij[d];
              gu_all[(b * n_in + i) * d_in + p] += acc;
            }
          }
        }
      }
    }
  });
  return VoteTensor{std::move(result)};
}

RoutingResult dynamic_routing(const VoteTensor& votes, std::size_t iterations, const Tensor* frozen_coupling) {
  if (iterations == 0) throw ContractError("dynamic_routing: routing iterations must be at least 1");
  const Shape& vs = votes.votes.shape();
  if (vs.size() != 3 && vs.size() != 4) throw ShapeError("dynamic_routing: votes must be rank 3 or 4");
  const bool batched = vs.size() == 4;
  const std::size_t batch = batched ? vs[0] : 1;
  const std::size_t n_in = vs[vs.size() - 3];
  const std::size_t n_out = vs[vs.size() - 2];
  const std::size_t dim = vs[vs.size() - 1];
  const std::size_t pairs = n_in * n_out;

  std::vector<float> logits(batch * pairs, 0.0f);
  auto coupling = std::make_shared<std::vector<float>>(batch * pairs);

  if (frozen_coupling != nullptr) {
    if (frozen_coupling->size() != coupling->size()) throw ShapeError("dynamic_routing: frozen coupling shape");
    std::copy(frozen_coupling->data().begin(), frozen_coupling->data().end(), coupling->begin());
  } else {
    const auto u = votes.votes.data();
    std::vector<float> v(n_out * dim);
    for (std::size_t b = 0; b < batch; ++b) {
      float* lg = logits.data() + b * pairs;
      float* c = coupling->data() + b * pairs;
      const float* ub = u.data() + b * pairs * dim;
      for (std::size_t r = 0; r < iterations; ++r) {
        // c_ij = softmax over classes of the logits of capsule i.
        for (std::size_t i = 0; i < n_in; ++i) {
          const float* row = lg + i * n_out;
          float top = row[0];
          for (std::size_t j = 1; j < n_out; ++j) top = std::max(top, row[j]);
          float total = 0.0f;
          for (std::size_t j = 0; j < n_out; ++j) {
            c[i * n_out + j] = std::exp(row[j] - top);
            total += c[i * n_out + j];
          }
          const float inv = 1.0f / total;
          for (std::size_t j = 0; j < n_out; ++j) c[i * n_out + j] *= inv;
        }
        // The last iteration's sum and agreement run on the differentiable path below.
        if (r + 1 == iterations) break;

        std::fill(v.begin(), v.end(), 0.0f);
        for (std::size_t i = 0; i < n_in; ++i) {
          for (std::size_t j = 0; j < n_out; ++j) {
            const float cij = c[i * n_out + j];
            const float* src = ub + (i * n_out + j) * dim;
            float* dst = v.data() + j * dim;
            for (std::size_t d = 0; d < dim; ++d) dst[d] += cij * src[d];
          }
        }
        for (std::size_t j = 0; j < n_out; ++j) squash_vector(v.data() + j * dim, dim);
        for (std::size_t i = 0; i < n_in; ++i) {
          for (std::size_t j = 0; j < n_out; ++j) {
            const float* src = ub + (i * n_out + j) * dim;
            const float* vj = v.data() + j * dim;
            float agreement = 0.0f;
            for (std::size_t d = 0; d < dim; ++d) agreement += src[d] * vj[d];
            lg[i * n_out + j] += agreement;
          }
        }
      }
    }
  }

  Tensor s = coupled_sum(votes.votes, coupling, batch, n_in, n_out, dim);
  Tensor v = squash(s);
  if (frozen_coupling == nullptr) {
    // Final agreement update, so every iteration costs the same and the
    // returned logits reflect the returned capsules.
    const auto u = votes.votes.data();
    const auto vv = v.data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n_in; ++i) {
        for (std::size_t j = 0; j < n_out; ++j) {
          const float* src = u.data() + ((b * n_in + i) * n_out + j) * dim;
          const float* vj = vv.data() + (b * n_out + j) * dim;
          float agreement = 0.0f;
          for (std::size_t d = 0; d < dim; ++d) agreement += src[d] * vj[d];
          logits[b * pairs + i * n_out + j] += agreement;
        }
      }
    }
  }
  if (!batched) v = reshape(v, {n_out, dim});

  const Shape state_shape = batched ? Shape{batch, n_in, n_out} : Shape{n_in, n_out};
  RoutingState state{Tensor::from_data(state_shape, std::move(logits)),
                     Tensor::from_data(state_shape, std::vector<float>(*coupling))};
  return RoutingResult{CapsuleBlock{std::move(v)}, std::move(state)};
}

Tensor class_probabilities(const CapsuleBlock& digit_caps) {
  return l2_norm(digit_caps.values, digit_caps.values.rank() - 1);
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t width = scores.dim(scores.rank() - 1);
  const std::size_t rows = scores.size() / width;
  const auto v = scores.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < width; ++k) {
      if (v[r * width + k] > v[r * width + best]) best = k;
    }
    out[r] = best;
  }
  return out;
}

// ---- the network -------------------------------------------------------------------------

CapsNet::CapsNet(const CapsNetConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  stem_ = Conv2dLayer::create(config_.stem_spec(), rng);
  primary_ = Conv2dLayer::create(config_.primary_spec(), rng);
  const std::size_t d_in = config_.primary.capsule_dim;
  const float bound = 1.0f / std::sqrt(static_cast<float>(d_in));
  digit_weights_ =
      Tensor::uniform({config_.n_primary(), config_.n_class, d_in, config_.digit_dim}, -bound, bound, rng, true);
  std::size_t width = config_.n_class * config_.digit_dim;
  for (auto hidden : config_.decoder_hidden) {
    decoder_.push_back(LinearLayer::create(width, hidden, rng));
    width = hidden;
  }
  decoder_.push_back(LinearLayer::create(width, config_.decoder_output(), rng));
}

CapsuleBlock CapsNet::primary_capsules(const Tensor& stem_output) const {
  Tensor x = stem_output;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(1) != config_.stem_channels || x.dim(2) != config_.stem_side() ||
      x.dim(3) != config_.stem_side()) {
    throw ShapeError("primary_capsules: stem output " + to_string(stem_output.shape()) + " does not match config");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t side = config_.primary_side();
  const std::size_t channels = config_.primary.channels;
  const std::size_t dim = config_.primary.capsule_dim;
  Tensor maps = conv_forward(primary_, x);  // [B, C*D, h, w]
  // Channel c*D + d holds component d of capsule channel c. Capsule index is
  // (c, y, x) in row-major order.
  maps = reshape(maps, {batch, channels, dim, side * side});
  maps = permute(maps, {0, 1, 3, 2});
  maps = reshape(maps, {batch, channels * side * side, dim});
  return squash(CapsuleBlock{maps});
}

Tensor CapsNet::decode(const CapsuleBlock& digit_caps, std::optional<std::span<const std::size_t>> labels) const {
  Tensor caps = digit_caps.values;
  if (caps.rank() == 2) caps = reshape(caps, {1, caps.dim(0), caps.dim(1)});
  const std::size_t batch = caps.dim(0);
  const std::size_t n_class = caps.dim(1);
  const std::size_t dim = caps.dim(2);
  if (n_class * dim != decoder_.front().in_features) {
    throw ShapeError("decode: capsule block " + to_string(caps.shape()) + " does not match decoder input");
  }
  std::vector<std::size_t> mask_rows;
  if (labels) {
    if (labels->size() != batch) throw ContractError("decode: label count differs from batch size");
    for (auto label : *labels) {
      if (label >= n_class) {
        throw ContractError("decode: target label " + std::to_string(label) + " >= n_class " +
                            std::to_string(n_class));
      }
    }
    mask_rows.assign(labels->begin(), labels->end());
  } else {
    NoGradGuard no_grad;
    mask_rows = argmax_rows(class_probabilities(CapsuleBlock{caps}));
  }
  std::vector<float> mask(batch * n_class * dim, 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>((b * n_class + mask_rows[b]) * dim), dim, 1.0f);
  }
  Tensor x = mul(caps, Tensor::from_data(caps.shape(), std::move(mask)));
  x = reshape(x, {batch, n_class * dim});
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    x = linear_forward(decoder_[l], x);
    x = l + 1 < decoder_.size() ? relu(x) : sigmoid(x);
  }
  return x;
}

CapsNetOutput CapsNet::forward(const Tensor& images, std::optional<std::span<const std::size_t>> labels,
                               const ForwardOptions& options) const {
  const auto start = Clock::now();
  Tensor x = images;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(1) != config_.input_channels || x.dim(2) != config_.input_side ||
      x.dim(3) != config_.input_side) {
    throw ShapeError("capsnet: input " + to_string(images.shape()) + " does not match native side " +
                     std::to_string(config_.input_side));
  }

  auto t = Clock::now();
  Tensor stem = relu(conv_forward(stem_, x));
  if (options.timings) options.timings->stem_ms += elapsed_ms(t);

  t = Clock::now();
  CapsuleBlock primary = primary_capsules(stem);
  if (options.timings) options.timings->primary_ms += elapsed_ms(t);

  t = Clock::now();
  VoteTensor votes = compute_votes(primary, digit_weights_);
  if (options.timings) options.timings->votes_ms += elapsed_ms(t);

  t = Clock::now();
  RoutingResult routed = dynamic_routing(votes, options.routing_iterations.value_or(config_.routing_iterations),
                                          options.frozen_coupling);
  if (options.timings) options.timings->routing_ms += elapsed_ms(t);

  CapsNetOutput out;
  out.class_scores = class_probabilities(routed.digit_caps);
  out.digit_caps = routed.digit_caps;
  out.routing = std::move(routed.state);
  if (options.reconstruct) {
    t = Clock::now();
    out.reconstruction = decode(out.digit_caps, labels);
    if (options.timings) options.timings->decoder_ms += elapsed_ms(t);
  }
  if (options.timings) options.timings->total_ms += elapsed_ms(start);
  return out;
}

ParameterList CapsNet::parameters() const {
  ParameterList params;
  stem_.append_parameters("stem", params);
  primary_.append_parameters("primary", params);
  params.push_back({"digit.weight", digit_weights_});
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    decoder_[l].append_parameters("decoder." + std::to_string(l), params);
  }
  return params;
}

ParameterReport CapsNet::count_parameters() const {
  ParameterReport report;
  report.rows.push_back({"conv", stem_.weights.size() + stem_.bias.size(), 0});
  report.rows.push_back({"primary_caps", primary_.weights.size() + primary_.bias.size(), 0});
  report.rows.push_back({"digit_caps", digit_weights_.size(), config_.n_primary() * config_.n_class});
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    report.rows.push_back({"decoder_fc" + std::to_string(l), decoder_[l].weights.size() + decoder_[l].bias.size(), 0});
  }
  for (const auto& row : report.rows) {
    report.trainable += row.weights_and_biases;
    report.routing += row.routing_weights;
  }
  report.total = report.trainable + report.routing;
  return report;
}

}  // namespace caps
