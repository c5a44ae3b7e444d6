// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Named tensors, parameter sets, the CPTL checkpoint container, and
// layer-wise parameter distances.
//
// Scalars are held as double regardless of dtype. An f32 tensor only ever
// holds float-representable values (see NamedTensor::round_to_dtype), so its
// 4-byte on-disk form round-trips bit-exactly.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cptlab {

enum class DType : std::uint8_t { f32, f64 };

[[nodiscard]] std::string_view dtype_name(DType dtype) noexcept;
[[nodiscard]] DType parse_dtype(std::string_view name);
[[nodiscard]] constexpr std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::f32 ? 4 : 8; }

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t shape_numel(const Shape& shape) noexcept;
[[nodiscard]] std::string shape_string(const Shape& shape);

class NamedTensor {
public:
    // Throws ValidationError when the shape is empty, has a zero dimension, or
    // does not match data.size(). Values are rounded to dtype on construction.
    NamedTensor(std::string name, Shape shape, DType dtype, std::vector<double> data);

    static NamedTensor zeros(std::string name, Shape shape, DType dtype);

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] DType dtype() const noexcept { return dtype_; }
    [[nodiscard]] std::size_t numel() const noexcept { return data_.size(); }
    [[nodiscard]] std::size_t rows() const noexcept { return shape_.front(); }
    [[nodiscard]] std::size_t cols() const noexcept { return data_.size() / shape_.front(); }

    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    // Callers that write through this must call round_to_dtype() afterwards.
    [[nodiscard]] std::span<double> mutable_data() noexcept { return data_; }

    void round_to_dtype() noexcept;
    [[nodiscard]] bool all_finite() const noexcept;

private:
    std::string name_;
    Shape shape_;
    DType dtype_;
    std::vector<double> data_;
};

// Same name, shape, dtype and bit pattern of every scalar.
[[nodiscard]] bool bit_equal(const NamedTensor& a, const NamedTensor& b) noexcept;

// Layer ids: embedding = 0, transformer blocks = 1..L, head = L+1.
using LayerId = int;

class ParameterSet {
public:
    // Throws ValidationError on a duplicate name.
    void add(NamedTensor tensor, std::optional<LayerId> layer = std::nullopt);

    [[nodiscard]] bool contains(std::string_view name) const;
    [[nodiscard]] const NamedTensor& at(std::string_view name) const;
    [[nodiscard]] NamedTensor& at(std::string_view name);
    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const;

    [[nodiscard]] std::span<const NamedTensor> tensors() const noexcept { return tensors_; }
    [[nodiscard]] std::span<NamedTensor> tensors() noexcept { return tensors_; }
    [[nodiscard]] std::size_t size() const noexcept { return tensors_.size(); }
    [[nodiscard]] bool empty() const noexcept { return tensors_.empty(); }
    [[nodiscard]] std::size_t total_numel() const noexcept;

    [[nodiscard]] std::optional<LayerId> layer_of(std::string_view name) const;
    [[nodiscard]] const std::map<std::string, LayerId>& layer_index() const noexcept { return layer_index_; }
    void set_layer(std::string_view name, LayerId layer);

    // Zero-filled set with the same names, shapes, dtypes and layer ids.
    [[nodiscard]] ParameterSet zeros_like() const;

private:
    std::vector<NamedTensor> tensors_;
    std::unordered_map<std::string, std::size_t> by_name_;
    std::map<std::string, LayerId> layer_index_;
};

[[nodiscard]] bool bit_equal(const ParameterSet& a, const ParameterSet& b) noexcept;

// Identical name sets, shapes and dtypes.
[[nodiscard]] bool congruent(const ParameterSet& a, const ParameterSet& b) noexcept;
// Throws CongruenceError naming the first mismatching tensor.
void require_congruent(const ParameterSet& a, const ParameterSet& b);

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "CPTL" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload
//
// The header lists {name, dtype, shape, byte_offset, byte_length} per tensor
// (offsets relative to payload start) plus the layer_index map. The payload is
// little-endian scalars in header order.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Atomic: writes a sibling temp file then renames it over path.
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
[[nodiscard]] ParameterSet load_checkpoint(const std::filesystem::path& path);

[[nodiscard]] std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params);
[[nodiscard]] ParameterSet decode_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Parameter shift
// ---------------------------------------------------------------------------

using LayerDistances = std::map<LayerId, double>;

// Euclidean norm of the concatenated differences of every tensor assigned to
// each layer, accumulated in double. Requires congruent inputs and a layer id
// for every tensor of a.
[[nodiscard]] LayerDistances l2_distance_per_layer(const ParameterSet& a, const ParameterSet& b);

enum class ShiftAggregate : std::uint8_t { mean, sum };

[[nodiscard]] double aggregate_shift(const LayerDistances& per_layer, ShiftAggregate mode);

} // namespace cptlab
