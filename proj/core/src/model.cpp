#include "caps/model.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace caps {

namespace {

std::size_t parse_count(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw FormatError("config field " + key + " has non-integer value '" + value + "'", 0);
  }
  return out;
}

std::string join(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCapsNet: return "capsnet";
    case ModelKind::kLeNet: return "lenet";
    case ModelKind::kAlexNet: return "alexnet";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "capsnet") return ModelKind::kCapsNet;
  if (name == "lenet") return ModelKind::kLeNet;
  if (name == "alexnet") return ModelKind::kAlexNet;
  throw ContractError("unknown model kind '" + std::string(name) + "'");
}

ConfigFields capsnet_config_fields(const CapsNetConfig& c) {
  return {
      {"input_side", std::to_string(c.input_side)},
      {"input_channels", std::to_string(c.input_channels)},
      {"stem_channels", std::to_string(c.stem_channels)},
      {"stem_kernel", std::to_string(c.stem_kernel)},
      {"stem_stride", std::to_string(c.stem_stride)},
      {"stem_padding", std::to_string(c.stem_padding)},
      {"primary_channels", std::to_string(c.primary.channels)},
      {"primary_dim", std::to_string(c.primary.capsule_dim)},
      {"primary_kernel", std::to_string(c.primary.kernel)},
      {"primary_stride", std::to_string(c.primary.stride)},
      {"primary_padding", std::to_string(c.primary.padding)},
      {"n_class", std::to_string(c.n_class)},
      {"digit_dim", std::to_string(c.digit_dim)},
      {"routing_iterations", std::to_string(c.routing_iterations)},
      {"reconstruction_scale", format_float(c.reconstruction_scale)},
      {"decoder_hidden", join(c.decoder_hidden)},
  };
}

CapsNetConfig capsnet_config_from_fields(const ConfigFields& fields) {
  CapsNetConfig c;
  for (const auto& [key, value] : fields) {
    if (key == "input_side") c.input_side = parse_count(key, value);
    else if (key == "input_channels") c.input_channels = parse_count(key, value);
    else if (key == "stem_channels") c.stem_channels = parse_count(key, value);
    else if (key == "stem_kernel") c.stem_kernel = parse_count(key, value);
    else if (key == "stem_stride") c.stem_stride = parse_count(key, value);
    else if (key == "stem_padding") c.stem_padding = parse_count(key, value);
    else if (key == "primary_channels") c.primary.channels = parse_count(key, value);
    else if (key == "primary_dim") c.primary.capsule_dim = parse_count(key, value);
    else if (key == "primary_kernel") c.primary.kernel = parse_count(key, value);
    else if (key == "primary_stride") c.primary.stride = parse_count(key, value);
    else if (key == "primary_padding") c.primary.padding = parse_count(key, value);
    else if (key == "n_class") c.n_class = parse_count(key, value);
    else if (key == "digit_dim") c.digit_dim = parse_count(key, value);
    else if (key == "routing_iterations") c.routing_iterations = parse_count(key, value);
    else if (key == "reconstruction_scale") {
      try {
        c.reconstruction_scale = std::stof(value);
      } catch (const std::exception&) {
        throw FormatError("config field reconstruction_scale has bad value '" + value + "'", 0);
      }
    } else if (key == "decoder_hidden") {
      c.decoder_hidden.clear();
      std::istringstream in(value);
      std::string item;
      while (std::getline(in, item, ',')) c.decoder_hidden.push_back(parse_count(key, item));
    } else {
      throw FormatError("unknown capsnet config field '" + key + "'", 0);
    }
  }
  return c;
}

ConfigFields CapsNetClassifier::config_fields() const { return capsnet_config_fields(net_.config()); }

LossOutput CapsNetClassifier::loss(const Tensor& images, std::span<const std::size_t> labels) const {
  const CapsNetOutput out = net_.forward(images, labels);
  const Tensor margin = margin_loss(out.class_scores, labels, margin_);
  const Tensor recon = reconstruction_loss(out.reconstruction, images);
  return {total_loss(margin, recon, net_.config().reconstruction_scale), out.class_scores};
}

Tensor CapsNetClassifier::scores(const Tensor& images) const {
  ForwardOptions options;
  options.reconstruct = false;
  return net_.forward(images, std::nullopt, options).class_scores;
}

ModelKind BaselineClassifier::kind() const {
  return net_.config().arch == BaselineArch::kLeNet ? ModelKind::kLeNet : ModelKind::kAlexNet;
}

ConfigFields BaselineClassifier::config_fields() const {
  return {{"n_class", std::to_string(net_.config().n_class)}};
}

LossOutput BaselineClassifier::loss(const Tensor& images, std::span<const std::size_t> labels) const {
  Tensor logits = net_.forward(images);
  return {cross_entropy(logits, labels), logits};
}

Tensor BaselineClassifier::scores(const Tensor& images) const { return net_.forward(images); }

std::unique_ptr<Classifier> make_classifier(ModelKind kind, const ConfigFields& fields, Rng& rng) {
  if (kind == ModelKind::kCapsNet) {
    return std::make_unique<CapsNetClassifier>(capsnet_config_from_fields(fields), rng);
  }
  BaselineConfig config;
  config.arch = kind == ModelKind::kLeNet ? BaselineArch::kLeNet : BaselineArch::kAlexNet;
  for (const auto& [key, value] : fields) {
    if (key == "n_class") config.n_class = parse_count(key, value);
    else throw FormatError("unknown baseline config field '" + key + "'", 0);
  }
  return std::make_unique<BaselineClassifier>(config, rng);
}

}  // namespace caps
