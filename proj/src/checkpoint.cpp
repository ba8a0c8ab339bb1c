// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tdmoe {
namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "tdmoe-checkpoint";

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  return 0;
}

template <typename S>
using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;

template <typename S>
void append_le(std::vector<std::uint8_t>& out, S value) {
  const Bits<S> bits = std::bit_cast<Bits<S>>(value);
  for (std::size_t i = 0; i < sizeof(S); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

template <typename S>
S read_le(const std::uint8_t* p) {
  Bits<S> bits = 0;
  for (std::size_t i = 0; i < sizeof(S); ++i) bits |= static_cast<Bits<S>>(p[i]) << (8 * i);
  return std::bit_cast<S>(bits);
}

[[noreturn]] void fail(const std::string& message) { throw LoadError("checkpoint: " + message); }

TensorEntry entry_from_json(const json& t) {
  TensorEntry e;
  try {
    e.name = t.at("name").get<std::string>();
    e.dtype = t.at("dtype").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    e.offset = t.at("offset").get<std::uint64_t>();
    e.length = t.at("length").get<std::uint64_t>();
  } catch (const json::exception& ex) {
    fail("malformed tensor entry " + (t.is_object() && t.contains("name") ? t["name"].dump() : std::string("?")) +
         ": " + ex.what());
  }
  return e;
}

template <typename T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& ex) {
    throw LoadError(std::string("checkpoint: config field '") + key + "': " + ex.what());
  }
}

}  // namespace

std::string CheckpointContainer::kind() const {
  return manifest.value("kind", std::string());
}

std::vector<TensorEntry> CheckpointContainer::tensors() const {
  std::vector<TensorEntry> out;
  if (!manifest.contains("tensors")) return out;
  for (const json& t : manifest["tensors"]) out.push_back(entry_from_json(t));
  return out;
}

TensorEntry CheckpointContainer::entry(std::string_view name) const {
  if (manifest.contains("tensors")) {
    for (const json& t : manifest["tensors"]) {
      if (t.is_object() && t.value("name", std::string()) == name) return entry_from_json(t);
    }
  }
  fail("missing tensor '" + std::string(name) + "'");
}

template <typename S>
void CheckpointContainer::add_tensor(const std::string& name, const Tensor<S>& t) {
  json e;
  e["name"] = name;
  e["dtype"] = dtype_name<S>();
  e["shape"] = t.shape();
  e["offset"] = payload.size();
  e["length"] = t.size() * sizeof(S);
  payload.reserve(payload.size() + t.size() * sizeof(S));
  for (S v : t.values()) append_le(payload, v);
  manifest["tensors"].push_back(std::move(e));
}

template <typename S>
Tensor<S> CheckpointContainer::tensor(std::string_view name) const {
  const TensorEntry e = entry(name);
  if (e.dtype != dtype_name<S>()) {
    fail("tensor '" + e.name + "' has dtype " + e.dtype + ", expected " +
         std::string(dtype_name<S>()));
  }
  Tensor<S> t(e.shape);
  if (e.offset > payload.size() || t.size() * sizeof(S) > payload.size() - e.offset) {
    fail("tensor '" + e.name + "' lies outside the payload");
  }
  const std::uint8_t* p = payload.data() + e.offset;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_le<S>(p + i * sizeof(S));
  return t;
}

std::string serialize_container(const CheckpointContainer& c) {
  const std::string manifest = c.manifest.dump(2);
  std::ostringstream out;
  out << kMagic << " v" << CheckpointContainer::kVersion << ' ' << manifest.size() << ' '
      << c.payload.size() << '\n'
      << manifest;
  out.write(reinterpret_cast<const char*>(c.payload.data()),
            static_cast<std::streamsize>(c.payload.size()));
  return out.str();
}

CheckpointContainer parse_container(std::string_view bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos) fail("missing header line");
  std::istringstream header{std::string(bytes.substr(0, nl))};
  std::string magic, version;
  std::uint64_t manifest_len = 0, payload_len = 0;
  if (!(header >> magic >> version >> manifest_len >> payload_len) || magic != kMagic) {
    fail("not a tdmoe checkpoint");
  }
  if (version != "v" + std::to_string(CheckpointContainer::kVersion)) {
    fail("unsupported version " + version);
  }
  const std::uint64_t available = bytes.size() - nl - 1;
  if (manifest_len > available || payload_len != available - manifest_len) {
    fail("file holds " + std::to_string(available) + " bytes after the header, expected " +
         std::to_string(manifest_len) + " manifest + " + std::to_string(payload_len) +
         " payload (truncated or padded)");
  }

  CheckpointContainer c;
  try {
    c.manifest = json::parse(bytes.substr(nl + 1, manifest_len));
  } catch (const json::exception& ex) {
    fail(std::string("corrupt manifest: ") + ex.what());
  }
  if (!c.manifest.is_object() || c.manifest.value("format", std::string()) != kMagic ||
      c.manifest.value("version", 0) != CheckpointContainer::kVersion ||
      !c.manifest.contains("tensors") || !c.manifest["tensors"].is_array()) {
    fail("corrupt manifest: missing format, version or tensor table");
  }
  const auto* data = reinterpret_cast<const std::uint8_t*>(bytes.data() + nl + 1 + manifest_len);
  c.payload.assign(data, data + payload_len);

  std::vector<TensorEntry> entries = c.tensors();
  for (const TensorEntry& e : entries) {
    const std::size_t width = dtype_size(e.dtype);
    if (width == 0) fail("tensor '" + e.name + "' has unknown dtype '" + e.dtype + "'");
    std::uint64_t count = 1;
    for (std::size_t d : e.shape) {
      if (d != 0 && count > UINT64_MAX / d) fail("tensor '" + e.name + "' shape overflows");
      count *= d;
    }
    if (count > UINT64_MAX / width || count * width != e.length) {
      fail("tensor '" + e.name + "' length " + std::to_string(e.length) +
           " does not match shape " + to_string(e.shape) + " of " + e.dtype);
    }
    if (e.offset > payload_len || e.length > payload_len - e.offset) {
      fail("tensor '" + e.name + "' byte range [" + std::to_string(e.offset) + ", +" +
           std::to_string(e.length) + ") exceeds payload of " + std::to_string(payload_len));
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const TensorEntry& a, const TensorEntry& b) { return a.offset < b.offset; });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i - 1].offset + entries[i - 1].length > entries[i].offset) {
      fail("tensor '" + entries[i].name + "' overlaps '" + entries[i - 1].name + "'");
    }
  }
  return c;
}

void save_container(const std::filesystem::path& path, const CheckpointContainer& c) {
  const std::string bytes = serialize_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

CheckpointContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_container(buf.str());
}

json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},   {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},     {"max_seq_len", c.max_seq_len},
          {"activation", std::string(activation_name(c.activation))},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = field<std::size_t>(j, "vocab_size");
  c.embed_dim = field<std::size_t>(j, "embed_dim");
  c.hidden_dim = field<std::size_t>(j, "hidden_dim");
  c.num_layers = field<std::size_t>(j, "num_layers");
  c.num_heads = field<std::size_t>(j, "num_heads");
  c.max_seq_len = field<std::size_t>(j, "max_seq_len");
  c.activation = parse_activation(field<std::string>(j, "activation"));
  c.seed = field<std::uint64_t>(j, "seed");
  return c;
}

json adapt_config_json(const AdaptConfig& c) {
  return {{"theta", c.theta},
          {"lambda_llm", c.lambda_llm},
          {"lambda_router", c.lambda_router},
          {"steps", c.steps},
          {"batch", c.batch},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"freeze_attention", c.freeze_attention},
          {"ablation_mode", c.ablation_mode},
          {"auto_reorder", c.auto_reorder},
          {"num_experts", c.num_experts},
          {"router_hidden", c.router_hidden},
          {"router_nonlinearity", std::string(router_nonlinearity_name(c.router_nonlinearity))},
          {"calibration_tokens", c.calibration_tokens},
          {"seed", c.seed}};
}

AdaptConfig adapt_config_from_json(const json& j) {
  AdaptConfig c;
  c.theta = field<double>(j, "theta");
  c.lambda_llm = field<double>(j, "lambda_llm");
  c.lambda_router = field<double>(j, "lambda_router");
  c.steps = field<std::size_t>(j, "steps");
  c.batch = field<std::size_t>(j, "batch");
  c.lr = field<double>(j, "lr");
  c.weight_decay = field<double>(j, "weight_decay");
  c.freeze_attention = field<bool>(j, "freeze_attention");
  c.ablation_mode = field<bool>(j, "ablation_mode");
  c.auto_reorder = field<bool>(j, "auto_reorder");
  c.num_experts = field<std::size_t>(j, "num_experts");
  c.router_hidden = field<std::size_t>(j, "router_hidden");
  c.router_nonlinearity = parse_router_nonlinearity(field<std::string>(j, "router_nonlinearity"));
  c.calibration_tokens = field<std::size_t>(j, "calibration_tokens");
  c.seed = field<std::uint64_t>(j, "seed");
  return c;
}

namespace {

template <typename S>
CheckpointContainer base_container(const DenseLm<S>& model, const std::string& kind,
                                   const json& meta) {
  CheckpointContainer c;
  c.manifest["format"] = kMagic;
  c.manifest["version"] = CheckpointContainer::kVersion;
  c.manifest["kind"] = kind;
  c.manifest["config"] = model_config_json(model.config);
  std::vector<int> symbols;
  for (unsigned char ch : model.vocab.symbols()) symbols.push_back(ch);
  c.manifest["vocab"] = symbols;
  c.manifest["meta"] = meta.is_null() ? json::object() : meta;
  c.manifest["tensors"] = json::array();
  for (const auto& [name, p] : model.named_parameters()) c.add_tensor(name, p.value());
  return c;
}

template <typename S>
Tensor<S> checked(const CheckpointContainer& c, const std::string& name, const Shape& expected) {
  Tensor<S> t = c.tensor<S>(name);
  if (t.shape() != expected) {
    fail("tensor '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
         to_string(expected));
  }
  return t;
}

}  // namespace

template <typename S>
CheckpointContainer to_container(const DenseLm<S>& model, const json& meta) {
  return base_container(model, model.reordered ? "reordered" : "dense", meta);
}

template <typename S>
CheckpointContainer to_container(const AdaptedLm<S>& model, const json& meta) {
  CheckpointContainer c = base_container(model.base, "adapted", meta);
  c.manifest["adapt"] = adapt_config_json(model.config);
  c.manifest["widths"] = model.widths;
  for (std::size_t l = 0; l < model.routers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".router.";
    c.add_tensor(p + "w1", model.routers[l].w1.value());
    c.add_tensor(p + "w2", model.routers[l].w2.value());
  }
  return c;
}

template <typename S>
DenseLm<S> dense_from_container(const CheckpointContainer& c) {
  const std::string kind = c.kind();
  if (kind != "dense" && kind != "reordered" && kind != "adapted") {
    fail("unknown checkpoint kind '" + kind + "'");
  }
  ModelConfig config;
  std::vector<unsigned char> symbols;
  try {
    config = model_config_from_json(c.manifest.at("config"));
    for (int s : c.manifest.at("vocab").get<std::vector<int>>()) {
      if (s < 0 || s > 255) fail("vocabulary symbol out of byte range");
      symbols.push_back(static_cast<unsigned char>(s));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(std::string("corrupt manifest: ") + ex.what());
  }
  DenseLm<S> m = init_dense_lm<S>(config, Vocabulary::from_symbols(symbols));
  for (auto& [name, p] : m.named_parameters()) {
    p.mutable_value() = checked<S>(c, name, p.value().shape());
  }
  m.reordered = kind != "dense";
  return m;
}

template <typename S>
AdaptedLm<S> adapted_from_container(const CheckpointContainer& c) {
  if (c.kind() != "adapted") fail("expected an adapted checkpoint, got '" + c.kind() + "'");
  if (!c.manifest.contains("adapt")) fail("corrupt manifest: missing adapt section");
  const AdaptConfig ac = adapt_config_from_json(c.manifest["adapt"]);
  AdaptedLm<S> m = init_adapted(dense_from_container<S>(c), ac);
  for (std::size_t l = 0; l < m.routers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".router.";
    m.routers[l].w1.mutable_value() = checked<S>(c, p + "w1", m.routers[l].w1.value().shape());
    m.routers[l].w2.mutable_value() = checked<S>(c, p + "w2", m.routers[l].w2.value().shape());
  }
  return m;
}

#define TDMOE_INSTANTIATE(S)                                                             \
  template void CheckpointContainer::add_tensor<S>(const std::string&, const Tensor<S>&); \
  template Tensor<S> CheckpointContainer::tensor<S>(std::string_view) const;             \
  template CheckpointContainer to_container<S>(const DenseLm<S>&, const json&);          \
  template CheckpointContainer to_container<S>(const AdaptedLm<S>&, const json&);        \
  template DenseLm<S> dense_from_container<S>(const CheckpointContainer&);               \
  template AdaptedLm<S> adapted_from_container<S>(const CheckpointContainer&);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
