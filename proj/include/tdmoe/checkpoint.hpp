// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tdmoe/adaptation.hpp"

namespace tdmoe {

/// One named tensor inside a container payload.
struct TensorEntry {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

/// Header line `tdmoe-checkpoint v1 <manifest bytes> <payload bytes>`, then a
/// JSON manifest, then one contiguous little-endian payload. The manifest holds
/// `format`, `version`, `kind`, `config`, `vocab`, `meta` and the tensor table.
struct CheckpointContainer {
  static constexpr int kVersion = 1;

  nlohmann::json manifest;
  std::vector<std::uint8_t> payload;

  std::string kind() const;
  std::vector<TensorEntry> tensors() const;
  TensorEntry entry(std::string_view name) const;

  /// Appends a tensor to the payload and the manifest table.
  template <typename S>
  void add_tensor(const std::string& name, const Tensor<S>& t);

  /// Decodes a tensor; its dtype must match S.
  template <typename S>
  Tensor<S> tensor(std::string_view name) const;
};

std::string serialize_container(const CheckpointContainer& c);
/// Validates the header, manifest and every tensor's dtype, shape and byte
/// range, throwing LoadError that names the offending tensor.
CheckpointContainer parse_container(std::string_view bytes);

void save_container(const std::filesystem::path& path, const CheckpointContainer& c);
CheckpointContainer load_container(const std::filesystem::path& path);

nlohmann::json model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json adapt_config_json(const AdaptConfig& c);
AdaptConfig adapt_config_from_json(const nlohmann::json& j);

/// Kind "dense" or "reordered".
template <typename S>
CheckpointContainer to_container(const DenseLm<S>& model, const nlohmann::json& meta = {});
/// Kind "adapted"; includes router tensors and the adaptation config.
template <typename S>
CheckpointContainer to_container(const AdaptedLm<S>& model, const nlohmann::json& meta = {});

/// The dense (or reordered) model of any container kind; for adapted
/// containers this is the base without routers.
template <typename S>
DenseLm<S> dense_from_container(const CheckpointContainer& c);
template <typename S>
AdaptedLm<S> adapted_from_container(const CheckpointContainer& c);

template <typename S>
constexpr std::string_view dtype_name() {
  return sizeof(S) == 4 ? "f32" : "f64";
}

}  // namespace tdmoe
