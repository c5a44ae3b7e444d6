// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/tensor_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <system_error>

#include <json.hpp>

#include "cptlab/errors.hpp"

namespace cptlab {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'C', 'P', 'T', 'L'};
constexpr std::size_t kPreambleSize = 4 + 4 + 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
        v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
    }
    return v;
}

} // namespace

std::string_view dtype_name(DType dtype) noexcept { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
    if (name == "f32") {
        return DType::f32;
    }
    if (name == "f64") {
        return DType::f64;
    }
    throw ValidationError("unknown dtype '" + std::string(name) + "'");
}

std::size_t shape_numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// NamedTensor
// ---------------------------------------------------------------------------

NamedTensor::NamedTensor(std::string name, Shape shape, DType dtype, std::vector<double> data)
    : name_(std::move(name)), shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
    if (name_.empty()) {
        throw ValidationError("tensor name must be non-empty");
    }
    if (shape_.empty() || std::ranges::find(shape_, std::size_t{0}) != shape_.end()) {
        throw ValidationError("tensor '" + name_ + "' has invalid shape " + shape_string(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ValidationError("tensor '" + name_ + "' shape " + shape_string(shape_) + " does not match " +
                              std::to_string(data_.size()) + " scalars");
    }
    round_to_dtype();
}

NamedTensor NamedTensor::zeros(std::string name, Shape shape, DType dtype) {
    const std::size_t n = shape_numel(shape);
    return {std::move(name), std::move(shape), dtype, std::vector<double>(n, 0.0)};
}

void NamedTensor::round_to_dtype() noexcept {
    if (dtype_ == DType::f32) {
        for (double& v : data_) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

bool NamedTensor::all_finite() const noexcept {
    return std::ranges::all_of(data_, [](double v) { return std::isfinite(v); });
}

bool bit_equal(const NamedTensor& a, const NamedTensor& b) noexcept {
    if (a.name() != b.name() || a.shape() != b.shape() || a.dtype() != b.dtype()) {
        return false;
    }
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// ParameterSet
// ---------------------------------------------------------------------------

void ParameterSet::add(NamedTensor tensor, std::optional<LayerId> layer) {
    const std::string& name = tensor.name();
    if (by_name_.contains(name)) {
        throw ValidationError("duplicate tensor name '" + name + "'");
    }
    by_name_.emplace(name, tensors_.size());
    if (layer) {
        layer_index_[name] = *layer;
    }
    tensors_.push_back(std::move(tensor));
}

bool ParameterSet::contains(std::string_view name) const { return by_name_.contains(std::string(name)); }

std::optional<std::size_t> ParameterSet::find(std::string_view name) const {
    const auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const NamedTensor& ParameterSet::at(std::string_view name) const {
    const auto idx = find(name);
    if (!idx) {
        throw ValidationError("no tensor named '" + std::string(name) + "'");
    }
    return tensors_[*idx];
}

NamedTensor& ParameterSet::at(std::string_view name) {
    return const_cast<NamedTensor&>(std::as_const(*this).at(name));
}

std::size_t ParameterSet::total_numel() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors_) {
        n += t.numel();
    }
    return n;
}

std::optional<LayerId> ParameterSet::layer_of(std::string_view name) const {
    const auto it = layer_index_.find(std::string(name));
    if (it == layer_index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

void ParameterSet::set_layer(std::string_view name, LayerId layer) {
    if (!contains(name)) {
        throw ValidationError("layer assignment for unknown tensor '" + std::string(name) + "'");
    }
    layer_index_[std::string(name)] = layer;
}

ParameterSet ParameterSet::zeros_like() const {
    ParameterSet out;
    for (const auto& t : tensors_) {
        out.add(NamedTensor::zeros(t.name(), t.shape(), t.dtype()), layer_of(t.name()));
    }
    return out;
}

bool bit_equal(const ParameterSet& a, const ParameterSet& b) noexcept {
    if (a.size() != b.size() || a.layer_index() != b.layer_index()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bit_equal(a.tensors()[i], b.tensors()[i])) {
            return false;
        }
    }
    return true;
}

namespace {

std::optional<std::string> first_mismatch(const ParameterSet& a, const ParameterSet& b) {
    for (const auto& t : a.tensors()) {
        const auto idx = b.find(t.name());
        if (!idx) {
            return "tensor '" + t.name() + "' missing from second set";
        }
        const auto& u = b.tensors()[*idx];
        if (t.shape() != u.shape()) {
            return "tensor '" + t.name() + "' shape " + shape_string(t.shape()) + " vs " + shape_string(u.shape());
        }
        if (t.dtype() != u.dtype()) {
            return "tensor '" + t.name() + "' dtype " + std::string(dtype_name(t.dtype())) + " vs " +
                   std::string(dtype_name(u.dtype()));
        }
    }
    for (const auto& u : b.tensors()) {
        if (!a.contains(u.name())) {
            return "tensor '" + u.name() + "' missing from first set";
        }
    }
    return std::nullopt;
}

} // namespace

bool congruent(const ParameterSet& a, const ParameterSet& b) noexcept {
    try {
        return !first_mismatch(a, b).has_value();
    } catch (...) {
        return false;
    }
}

void require_congruent(const ParameterSet& a, const ParameterSet& b) {
    if (auto why = first_mismatch(a, b)) {
        throw CongruenceError("parameter sets are not congruent: " + *why);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params) {
    nlohmann::ordered_json header;
    header["tensors"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& t : params.tensors()) {
        const std::uint64_t length = t.numel() * dtype_size(t.dtype());
        header["tensors"].push_back({{"name", t.name()},
                                     {"dtype", dtype_name(t.dtype())},
                                     {"shape", t.shape()},
                                     {"byte_offset", offset},
                                     {"byte_length", length}});
        offset += length;
    }
    header["layer_index"] = nlohmann::ordered_json::object();
    for (const auto& [name, layer] : params.layer_index()) {
        header["layer_index"][name] = layer;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    out.reserve(kPreambleSize + text.size() + offset);
    put_u32(out, kCheckpointVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : params.tensors()) {
        if (t.dtype() == DType::f32) {
            for (double v : t.data()) {
                put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            }
        } else {
            for (double v : t.data()) {
                put_u64(out, std::bit_cast<std::uint64_t>(v));
            }
        }
    }
    return out;
}

ParameterSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw FormatError("not a CPTL checkpoint (bad magic)");
    }
    if (bytes.size() < kPreambleSize) {
        throw CorruptionError("checkpoint truncated inside preamble");
    }
    const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t header_len = get_le(bytes, 8, 8);
    if (header_len > bytes.size() - kPreambleSize) {
        throw CorruptionError("checkpoint truncated inside header");
    }
    const auto header_begin = reinterpret_cast<const char*>(bytes.data() + kPreambleSize);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_begin, header_begin + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const auto payload = bytes.subspan(kPreambleSize + header_len);

    ParameterSet params;
    try {
        std::uint64_t expected_offset = 0;
        for (const auto& entry : header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const DType dtype = parse_dtype(entry.at("dtype").get<std::string>());
            const auto shape = entry.at("shape").get<Shape>();
            const auto byte_offset = entry.at("byte_offset").get<std::uint64_t>();
            const auto byte_length = entry.at("byte_length").get<std::uint64_t>();
            if (params.contains(name)) {
                throw ValidationError("duplicate tensor name '" + name + "' in checkpoint header");
            }
            if (shape.empty() || byte_length != shape_numel(shape) * dtype_size(dtype)) {
                throw ValidationError("tensor '" + name + "' byte_length " + std::to_string(byte_length) +
                                      " does not match shape " + shape_string(shape));
            }
            if (byte_offset != expected_offset) {
                throw CorruptionError("tensor '" + name + "' byte_offset out of sequence");
            }
            if (byte_offset + byte_length > payload.size()) {
                throw CorruptionError("checkpoint payload truncated at tensor '" + name + "'");
            }
            std::vector<double> data(shape_numel(shape));
            const std::size_t width = dtype_size(dtype);
            for (std::size_t i = 0; i < data.size(); ++i) {
                const std::uint64_t raw = get_le(payload, byte_offset + i * width, width);
                data[i] = dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw)))
                                              : std::bit_cast<double>(raw);
            }
            NamedTensor t(name, shape, dtype, std::move(data));
            if (!t.all_finite()) {
                throw ValidationError("tensor '" + name + "' contains non-finite values");
            }
            params.add(std::move(t));
            expected_offset += byte_length;
        }
        if (expected_offset != payload.size()) {
            throw CorruptionError("declared payload length " + std::to_string(expected_offset) +
                                  " differs from actual " + std::to_string(payload.size()));
        }
        for (const auto& [name, layer] : header.at("layer_index").items()) {
            params.set_layer(name, layer.get<LayerId>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    return params;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(params);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write failed for '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    }
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Parameter shift
// ---------------------------------------------------------------------------

LayerDistances l2_distance_per_layer(const ParameterSet& a, const ParameterSet& b) {
    require_congruent(a, b);
    std::map<LayerId, double> squared;
    for (const auto& t : a.tensors()) {
        const auto layer = a.layer_of(t.name());
        if (!layer) {
            throw ValidationError("tensor '" + t.name() + "' has no layer assignment");
        }
        const auto x = t.data();
        const auto y = b.at(t.name()).data();
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = x[i] - y[i];
            acc += d * d;
        }
        squared[*layer] += acc;
    }
    LayerDistances out;
    for (const auto& [layer, s] : squared) {
        out[layer] = std::sqrt(s);
    }
    return out;
}

double aggregate_shift(const LayerDistances& per_layer, ShiftAggregate mode) {
    if (per_layer.empty()) {
        throw DomainError("aggregate_shift of an empty layer map");
    }
    double sum = 0.0;
    for (const auto& [layer, d] : per_layer) {
        sum += d;
    }
    return mode == ShiftAggregate::sum ? sum : sum / static_cast<double>(per_layer.size());
}

} // namespace cptlab
