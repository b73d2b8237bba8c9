#include "seriex/layerexpand.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace seriex {

void ExpansionPolicy::validate() const {
  check_packed_bits(bits);
  if (first_last_bits != 0) check_packed_bits(first_last_bits);
  require(weight_terms_max >= 1, ErrorKind::InvalidArgument, "policy: weight_terms_max must be >= 1");
  require(activation_terms_max >= 1, ErrorKind::InvalidArgument, "policy: activation_terms_max must be >= 1");
  require(weight_stop_threshold > 0.0 && activation_stop_threshold > 0.0, ErrorKind::InvalidArgument,
          "policy: stop thresholds must be > 0");
  scheme_w.validate();
  scheme_a.validate();
}

nlohmann::json scheme_to_json(const QuantScheme& s) {
  nlohmann::json j;
  j["bits"] = s.bits;
  j["symmetric"] = s.symmetric;
  j["saturated"] = s.saturated;
  switch (s.clip.kind) {
    case ClipMode::Kind::None: j["clip"] = "none"; break;
    case ClipMode::Kind::Laplace: j["clip"] = "laplace"; break;
    case ClipMode::Kind::Fixed: j["clip"] = {{"fixed", {s.clip.lo, s.clip.hi}}}; break;
  }
  j["per_channel"] = s.granularity.per_channel;
  j["axis"] = s.granularity.axis;
  return j;
}

QuantScheme scheme_from_json(const nlohmann::json& j) {
  QuantScheme s;
  s.bits = j.value("bits", s.bits);
  s.symmetric = j.value("symmetric", s.symmetric);
  s.saturated = j.value("saturated", s.saturated);
  if (j.contains("clip")) {
    const auto& c = j["clip"];
    if (c.is_string() && c == "none") {
      s.clip = ClipMode::none();
    } else if (c.is_string() && c == "laplace") {
      s.clip = ClipMode::laplace();
    } else if (c.is_object() && c.contains("fixed") && c["fixed"].size() == 2) {
      s.clip = ClipMode::fixed(c["fixed"][0].get<double>(), c["fixed"][1].get<double>());
    } else {
      fail(ErrorKind::InvalidArgument, "scheme: unknown clip mode " + c.dump());
    }
  } else if (s.saturated) {
    s.clip = ClipMode::laplace();
  }
  s.granularity.per_channel = j.value("per_channel", s.granularity.per_channel);
  s.granularity.axis = j.value("axis", s.granularity.axis);
  s.validate();
  return s;
}

nlohmann::json policy_to_json(const ExpansionPolicy& p) {
  return {{"bits", p.bits},
          {"weight_terms_max", p.weight_terms_max},
          {"activation_terms_max", p.activation_terms_max},
          {"weight_stop_threshold", p.weight_stop_threshold},
          {"activation_stop_threshold", p.activation_stop_threshold},
          {"first_last_bits", p.first_last_bits},
          {"scheme_w", scheme_to_json(p.scheme_w)},
          {"scheme_a", scheme_to_json(p.scheme_a)},
          {"grid_mask",
           {{"weight_saturation", p.mask.weight_saturation},
            {"weight_bias", p.mask.weight_bias},
            {"act_bias", p.mask.act_bias},
            {"act_saturation", p.mask.act_saturation}}}};
}

ExpansionPolicy policy_from_json(const nlohmann::json& j, ExpansionPolicy p) {
  require(j.is_object(), ErrorKind::InvalidArgument, "policy must be a JSON object");
  p.bits = j.value("bits", p.bits);
  p.weight_terms_max = j.value("weight_terms_max", p.weight_terms_max);
  p.activation_terms_max = j.value("activation_terms_max", p.activation_terms_max);
  p.weight_stop_threshold = j.value("weight_stop_threshold", p.weight_stop_threshold);
  p.activation_stop_threshold = j.value("activation_stop_threshold", p.activation_stop_threshold);
  p.first_last_bits = j.value("first_last_bits", p.first_last_bits);
  if (j.contains("scheme_w")) p.scheme_w = scheme_from_json(j["scheme_w"]);
  if (j.contains("scheme_a")) p.scheme_a = scheme_from_json(j["scheme_a"]);
  if (j.contains("grid_mask")) {
    const auto& m = j["grid_mask"];
    p.mask.weight_saturation = m.value("weight_saturation", p.mask.weight_saturation);
    p.mask.weight_bias = m.value("weight_bias", p.mask.weight_bias);
    p.mask.act_bias = m.value("act_bias", p.mask.act_bias);
    p.mask.act_saturation = m.value("act_saturation", p.mask.act_saturation);
  }
  p.validate();
  return p;
}

std::size_t choose_weight_terms(double scale_1, int bits, const ExpansionPolicy& policy) {
  if (!(scale_1 > 0.0)) return 1;
  std::size_t n = 1;
  double s = scale_1;
  while (n < policy.weight_terms_max && std::ldexp(s, bits) >= policy.weight_stop_threshold) {
    s = std::ldexp(s, -bits);
    ++n;
  }
  return n;
}

ExpandedLayer expand_layer_weights(const ModelManifest& model, std::size_t layer_index, const ExpansionPolicy& policy,
                                   int bits) {
  policy.validate();
  check_packed_bits(bits);
  require(layer_index < model.layers.size(), ErrorKind::InvalidArgument, "layer index out of range");
  const auto& desc = model.layers[layer_index];
  require(is_matmul_layer(desc.kind), ErrorKind::Unsupported,
          "layer '" + desc.name + "' (" + std::string(layer_kind_name(desc.kind)) + ") has no weights to expand");

  const Tensor& w = model.param(layer_index, "weight");
  ExpandedLayer el;
  el.kind = desc.kind;
  el.name = desc.name;
  el.bits = bits;
  el.weight_shape = w.shape();
  el.stride = desc.stride;
  el.padding = desc.padding;
  el.policy = policy;
  el.activation_scheme = policy.scheme_a;
  el.activation_scheme.bits = bits;
  if (model.has_param(layer_index, "bias")) el.bias = model.param(layer_index, "bias").to_f64();

  QuantScheme ws = policy.scheme_w;
  ws.bits = bits;
  const auto probe = expand_tensor(w, ws, 1);
  const std::size_t n = choose_weight_terms(probe.max_base_scale(), bits, policy);
  // Stop early once the weights are represented exactly.
  el.weight = n == 1 ? probe
                     : expand_tensor_until(w, ws, n, std::numeric_limits<double>::denorm_min()).expansion;
  return el;
}

ExpandedLayer expand_layer_weights(const ModelManifest& model, std::size_t layer_index, const ExpansionPolicy& policy) {
  return expand_layer_weights(model, layer_index, policy, policy.bits);
}

// ---------------------------------------------------------------------------

Matrix im2col(const Matrix& input, const ConvGeometry& g) {
  require(input.cols == g.channels * g.height * g.width, ErrorKind::ShapeMismatch, "im2col: input width mismatch");
  require(g.height + 2 * g.padding >= g.kh && g.width + 2 * g.padding >= g.kw && g.stride >= 1,
          ErrorKind::ShapeMismatch, "im2col: kernel larger than padded input");
  const std::size_t oh = g.out_h(), ow = g.out_w(), positions = oh * ow;
  Matrix cols(g.channels * g.kh * g.kw, input.rows * positions);
  for (std::size_t b = 0; b < input.rows; ++b)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t ki = 0; ki < g.kh; ++ki)
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          const std::size_t row = (c * g.kh + ki) * g.kw + kj;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
              if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.height) ||
                  x >= static_cast<std::ptrdiff_t>(g.width))
                continue;
              cols(row, b * positions + oy * ow + ox) =
                  input(b, (c * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x));
            }
        }
  return cols;
}

Matrix col2out(const Matrix& product, std::size_t batch, std::size_t positions) {
  require(product.cols == batch * positions, ErrorKind::ShapeMismatch, "col2out: column count mismatch");
  Matrix out(batch, product.rows * positions);
  for (std::size_t o = 0; o < product.rows; ++o)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < positions; ++p) out(b, o * positions + p) = product(o, b * positions + p);
  return out;
}

namespace {

ConvGeometry conv_geometry(const Shape& input_shape, const Shape& weight_shape, std::size_t stride,
                           std::size_t padding) {
  require(input_shape.size() == 3, ErrorKind::ShapeMismatch, "conv2d expects (C, H, W) inputs, got " +
                                                                 shape_string(input_shape));
  require(weight_shape.size() == 4 && weight_shape[1] == input_shape[0], ErrorKind::ShapeMismatch,
          "conv2d weight " + shape_string(weight_shape) + " does not match input " + shape_string(input_shape));
  return {input_shape[0], input_shape[1], input_shape[2], weight_shape[2], weight_shape[3], stride, padding};
}

/// Activation operand (inner x columns) of the layer's matmul.
Matrix activation_operand(LayerKind kind, const Matrix& input, const Shape& input_shape, const Shape& weight_shape,
                          std::size_t stride, std::size_t padding, std::size_t& positions) {
  require(input.cols == element_count(input_shape), ErrorKind::ShapeMismatch,
          "layer input has " + std::to_string(input.cols) + " features, expected " + shape_string(input_shape));
  if (kind == LayerKind::Linear) {
    require(weight_shape.size() == 2 && weight_shape[1] == input.cols, ErrorKind::ShapeMismatch,
            "linear weight " + shape_string(weight_shape) + " does not match input width " +
                std::to_string(input.cols));
    positions = 1;
    return transpose(input);
  }
  const auto g = conv_geometry(input_shape, weight_shape, stride, padding);
  positions = g.out_h() * g.out_w();
  return im2col(input, g);
}

Matrix finish_output(const Matrix& product, std::size_t batch, std::size_t positions, const std::vector<double>& bias,
                     double bias_scale) {
  Matrix out = col2out(product, batch, positions);
  if (bias.empty()) return out;
  require(bias.size() == product.rows, ErrorKind::ShapeMismatch, "bias length does not match output channels");
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < product.rows; ++o) {
      const double v = bias_scale == 1.0 ? bias[o] : bias_scale * bias[o];
      for (std::size_t p = 0; p < positions; ++p) out(b, o * positions + p) += v;
    }
  return out;
}

}  // namespace

LayerForward forward_expanded_layer(const ExpandedLayer& el, const Matrix& input, const Shape& input_shape,
                                    std::size_t t_terms, bool use_stop_rule, ReducePlan plan) {
  require(t_terms >= 1, ErrorKind::InvalidArgument, "forward: at least one activation term is required");
  require(t_terms <= el.policy.activation_terms_max, ErrorKind::InvalidArgument,
          "forward: t_terms exceeds the policy maximum");
  std::size_t positions = 1;
  const Matrix a = activation_operand(el.kind, input, input_shape, el.weight_shape, el.stride, el.padding, positions);
  const Tensor at = Tensor::from_matrix(a);

  LayerForward out;
  TensorExpansion ae;
  if (use_stop_rule) {
    auto ad = expand_tensor_until(at, el.activation_scheme, t_terms, el.policy.activation_stop_threshold);
    out.diag.act_residual = ad.residual_max;
    out.diag.act_capped = ad.capped;
    ae = std::move(ad.expansion);
  } else {
    ae = expand_tensor(at, el.activation_scheme, t_terms);
    const auto rec = reconstruct(ae).to_f64();
    out.diag.act_residual = max_abs_diff(a.data, rec);
    out.diag.act_capped = out.diag.act_residual >= el.policy.activation_stop_threshold;
  }

  const TensorExpansion scaled = el.multiplier == 1.0 ? TensorExpansion{} : scale_expansion(el.weight, el.multiplier);
  const TensorExpansion& we = el.multiplier == 1.0 ? el.weight : scaled;
  const auto mm = expanded_matmul(we, ae, el.policy.mask, plan);

  out.output = finish_output(mm.value, input.rows, positions, el.bias, el.multiplier);
  out.diag.weight_terms = el.weight.term_count();
  out.diag.act_terms = ae.term_count();
  out.diag.pair_count = mm.pair_count;
  return out;
}

Matrix float_layer_forward(LayerKind kind, const Matrix& weight, const std::vector<double>& bias, const Matrix& input,
                           const Shape& input_shape, const Shape& weight_shape, std::size_t stride,
                           std::size_t padding) {
  require(is_matmul_layer(kind), ErrorKind::Unsupported, "float_layer_forward: not a matmul layer");
  std::size_t positions = 1;
  const Matrix a = activation_operand(kind, input, input_shape, weight_shape, stride, padding, positions);
  return finish_output(matmul(weight, a), input.rows, positions, bias, 1.0);
}

}  // namespace seriex
