// Copyright 2026 The qdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qdiff/calib.hpp"
#include "qdiff/error.hpp"
#include "qdiff/network.hpp"
#include "qdiff/quant_model.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Binary container:
//   "QDCK" | u32 version | u32 count
//   count x { u32 name_len | name | u32 rank | u64 dims[rank] | u32 dtype (0 = f32) | payload }
//   u32 crc32 of every preceding byte
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[4] = {'Q', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

using TensorList = std::vector<NamedTensor>;

inline const Tensor<float>* find_tensor(const TensorList& list, std::string_view name) {
  for (const auto& nt : list) {
    if (nt.name == name) return &nt.tensor;
  }
  return nullptr;
}

inline const Tensor<float>& get_tensor(const TensorList& list, std::string_view name) {
  const Tensor<float>* t = find_tensor(list, name);
  require(t != nullptr, ErrorKind::kIo, "checkpoint has no tensor '" + std::string(name) + "'");
  return *t;
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  bool has(std::size_t n) const noexcept { return n <= end_ - pos_; }

  void need(std::size_t n, const char* what) const {
    require(has(n), ErrorKind::kTruncated, std::string("file ends inside ") + what);
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const noexcept { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const TensorList& tensors) {
  std::set<std::string> seen;
  for (const auto& nt : tensors) {
    require(seen.insert(nt.name).second, ErrorKind::kDuplicateName,
            "duplicate tensor name '" + nt.name + "'");
  }
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    const Shape& shape = nt.tensor.shape();
    detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::put_u64(out, d);
    detail::put_u32(out, kDtypeF32);
    for (float f : nt.tensor.values()) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    }
  }
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

// Checks run in a fixed order: magic, version, structure (truncation),
// checksum, duplicate names.
inline TensorList decode_checkpoint(const std::vector<unsigned char>& bytes) {
  require(bytes.size() >= 4, ErrorKind::kTruncated, "file is shorter than the magic");
  require(std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0, ErrorKind::kBadMagic,
          "not a QDCK checkpoint");
  require(bytes.size() >= 8, ErrorKind::kTruncated, "file ends inside the header");
  detail::Reader version_reader(bytes, bytes.size());
  version_reader.take(4, "magic");
  const std::uint32_t version = version_reader.u32("version");
  require(version == kCheckpointVersion, ErrorKind::kUnknownVersion,
          "unsupported checkpoint version " + std::to_string(version));
  require(bytes.size() >= 16, ErrorKind::kTruncated, "file ends inside the header");
  detail::Reader r(bytes, bytes.size() - 4);
  r.take(8, "header");
  const std::uint32_t count = r.u32("tensor count");
  TensorList out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = r.u32("name length");
    const unsigned char* name = r.take(name_len, "tensor name");
    NamedTensor nt;
    nt.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::uint32_t rank = r.u32("rank");
    require(r.has(static_cast<std::size_t>(rank) * 8), ErrorKind::kTruncated,
            "file ends inside the dims of '" + nt.name + "'");
    Shape shape(rank);
    std::size_t elements = 1;
    for (auto& d : shape) {
      d = r.u64("dims");
      require(d == 0 || elements <= (bytes.size() / 4) / d, ErrorKind::kTruncated,
              "payload of '" + nt.name + "' exceeds the file");
      elements *= d;
    }
    const std::uint32_t dtype = r.u32("dtype");
    require(dtype == kDtypeF32, ErrorKind::kIo,
            "tensor '" + nt.name + "' has unsupported dtype " + std::to_string(dtype));
    require(r.has(elements * 4), ErrorKind::kTruncated,
            "file ends inside the payload of '" + nt.name + "'");
    const unsigned char* p = r.take(elements * 4, "payload");
    std::vector<float> values(elements);
    for (std::size_t i = 0; i < elements; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
      std::memcpy(&values[i], &bits, 4);
    }
    nt.tensor = Tensor<float>(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  require(r.pos() == bytes.size() - 4, ErrorKind::kTruncated,
          "unexpected bytes after the last tensor");
  detail::Reader crc_reader(bytes, bytes.size());
  crc_reader.take(bytes.size() - 4, "body");
  const std::uint32_t stored = crc_reader.u32("checksum");
  require(stored == detail::crc32_of(bytes.data(), bytes.size() - 4), ErrorKind::kCrcMismatch,
          "checksum mismatch");
  std::set<std::string> seen;
  for (const auto& nt : out) {
    require(seen.insert(nt.name).second, ErrorKind::kDuplicateName,
            "duplicate tensor name '" + nt.name + "'");
  }
  return out;
}

// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    require(static_cast<bool>(f), ErrorKind::kIo, "failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorKind::kIo, "cannot move checkpoint into place at '" + path.string() + "'");
  }
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorList& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

inline TensorList load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// Tensor layouts. Small integers are stored as exact f32 values; 64-bit seeds
// as four 16-bit limbs, least significant first.

namespace detail {

inline Tensor<float> vec(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor<float>({n}, std::move(v));
}

inline int as_int(float f, const std::string& what) {
  require(std::isfinite(f) && f == std::nearbyint(f), ErrorKind::kIo,
          what + " is not an integer");
  return static_cast<int>(f);
}

inline std::vector<float> u64_limbs(std::uint64_t v) {
  return {static_cast<float>(v & 0xFFFF), static_cast<float>((v >> 16) & 0xFFFF),
          static_cast<float>((v >> 32) & 0xFFFF), static_cast<float>(v >> 48)};
}

inline std::uint64_t from_limbs(const float* f) {
  std::uint64_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 16) | static_cast<std::uint64_t>(as_int(f[i], "seed limb"));
  return v;
}

}  // namespace detail

// meta.arch = [input_dim, width, num_blocks, embed_dim, embed_base, (from, to)*]
inline void append_model(TensorList& out, const NoisePredictor<float>& net) {
  const ArchConfig& a = net.arch();
  std::vector<float> arch = {static_cast<float>(a.input_dim), static_cast<float>(a.width),
                             static_cast<float>(a.num_blocks), static_cast<float>(a.embed_dim),
                             static_cast<float>(a.embed_base)};
  for (const SkipLink& s : a.skips) {
    arch.push_back(static_cast<float>(s.from_stage));
    arch.push_back(static_cast<float>(s.to_block));
  }
  out.push_back({"meta.arch", detail::vec(std::move(arch))});
  for (const auto& l : net.layers()) {
    out.push_back({l.name + ".weight", l.weight});
    out.push_back({l.name + ".bias", l.bias});
  }
}

inline NoisePredictor<float> model_from_tensors(const TensorList& list) {
  const Tensor<float>& m = get_tensor(list, "meta.arch");
  require(m.rank() == 1 && m.size() >= 5 && (m.size() - 5) % 2 == 0, ErrorKind::kIo,
          "malformed meta.arch");
  ArchConfig a;
  a.input_dim = detail::as_int(m[0], "input_dim");
  a.width = detail::as_int(m[1], "width");
  a.num_blocks = detail::as_int(m[2], "num_blocks");
  a.embed_dim = detail::as_int(m[3], "embed_dim");
  a.embed_base = m[4];
  a.skips.clear();
  for (std::size_t i = 5; i < m.size(); i += 2) {
    a.skips.push_back({detail::as_int(m[i], "skip"), detail::as_int(m[i + 1], "skip")});
  }
  NoisePredictor<float> net(a);
  for (auto& l : net.layers()) {
    const Tensor<float>& w = get_tensor(list, l.name + ".weight");
    const Tensor<float>& b = get_tensor(list, l.name + ".bias");
    require(w.shape() == l.weight.shape() && b.shape() == l.bias.shape(), ErrorKind::kIo,
            "shape mismatch for layer " + l.name);
    l.weight = w;
    l.bias = b;
  }
  return net;
}

inline TensorList model_tensors(const NoisePredictor<float>& net) {
  TensorList out;
  append_model(out, net);
  return out;
}

namespace detail {

inline std::vector<float> quantizer_meta(const QuantizerParams<float>& p) {
  return {static_cast<float>(p.bits), static_cast<float>(p.granularity == Granularity::kPerChannel),
          static_cast<float>(p.c_min), static_cast<float>(p.c_max),
          static_cast<float>(p.zero_offset), static_cast<float>(p.mode == RoundingMode::kAdaRound)};
}

inline void append_quantizer(TensorList& out, const std::string& prefix,
                             const QuantizerParams<float>& p) {
  out.push_back({prefix + ".meta", vec(quantizer_meta(p))});
  out.push_back({prefix + ".scale", vec(p.scale)});
  if (p.mode == RoundingMode::kAdaRound) {
    out.push_back({prefix + ".v", p.v});
    out.push_back({prefix + ".base", p.base});
  }
}

inline std::optional<QuantizerParams<float>> read_quantizer(const TensorList& list,
                                                            const std::string& prefix) {
  const Tensor<float>* meta = find_tensor(list, prefix + ".meta");
  if (meta == nullptr) return std::nullopt;
  require(meta->size() == 6, ErrorKind::kIo, "malformed " + prefix + ".meta");
  QuantizerParams<float> p;
  p.bits = as_int((*meta)[0], "bits");
  p.granularity = (*meta)[1] != 0.0f ? Granularity::kPerChannel : Granularity::kPerTensor;
  p.c_min = as_int((*meta)[2], "c_min");
  p.c_max = as_int((*meta)[3], "c_max");
  p.zero_offset = as_int((*meta)[4], "zero_offset");
  p.mode = (*meta)[5] != 0.0f ? RoundingMode::kAdaRound : RoundingMode::kNearest;
  const Tensor<float>& s = get_tensor(list, prefix + ".scale");
  p.scale.assign(s.values().begin(), s.values().end());
  if (p.mode == RoundingMode::kAdaRound) {
    p.v = get_tensor(list, prefix + ".v");
    p.base = get_tensor(list, prefix + ".base");
  }
  return p;
}

}  // namespace detail

// meta.quant = [bits_w, bits_a, per_channel, act_quant_enabled];
// meta.override.<layer> / meta.override_act.<layer> = [exempt, bits];
// wq.<layer>.{meta,scale,v,base} and aq.<layer>.{meta,scale}.
inline TensorList quantized_tensors(const QuantizedModel<float>& qm) {
  TensorList out;
  append_model(out, qm.base());
  const QuantConfig& c = qm.config();
  out.push_back({"meta.quant",
                 detail::vec({static_cast<float>(c.bits_w), static_cast<float>(c.bits_a),
                              static_cast<float>(c.granularity_w == Granularity::kPerChannel),
                              static_cast<float>(c.act_quant_enabled)})});
  for (const auto& [name, ov] : c.overrides) {
    out.push_back({"meta.override." + name,
                   detail::vec({static_cast<float>(ov.exempt), static_cast<float>(ov.bits)})});
  }
  for (const auto& [name, ov] : c.act_overrides) {
    out.push_back({"meta.override_act." + name,
                   detail::vec({static_cast<float>(ov.exempt), static_cast<float>(ov.bits)})});
  }
  for (std::size_t l = 0; l < qm.num_layers(); ++l) {
    if (const auto& p = qm.weight_quantizer(l)) detail::append_quantizer(out, "wq." + qm.layer_name(l), *p);
    if (const auto& p = qm.act_quantizer(l)) detail::append_quantizer(out, "aq." + qm.layer_name(l), *p);
  }
  return out;
}

inline bool is_quantized_checkpoint(const TensorList& list) {
  return find_tensor(list, "meta.quant") != nullptr;
}

inline QuantizedModel<float> quantized_from_tensors(const TensorList& list) {
  NoisePredictor<float> base = model_from_tensors(list);
  const Tensor<float>& m = get_tensor(list, "meta.quant");
  require(m.size() == 4, ErrorKind::kIo, "malformed meta.quant");
  QuantConfig c;
  c.bits_w = detail::as_int(m[0], "bits_w");
  c.bits_a = detail::as_int(m[1], "bits_a");
  c.granularity_w = m[2] != 0.0f ? Granularity::kPerChannel : Granularity::kPerTensor;
  c.act_quant_enabled = m[3] != 0.0f;
  for (const auto& nt : list) {
    for (auto [prefix, map] : {std::pair{std::string_view("meta.override."), &c.overrides},
                               std::pair{std::string_view("meta.override_act."), &c.act_overrides}}) {
      if (nt.name.starts_with(prefix)) {
        require(nt.tensor.size() == 2, ErrorKind::kIo, "malformed " + nt.name);
        (*map)[nt.name.substr(prefix.size())] = {nt.tensor[0] != 0.0f,
                                                 detail::as_int(nt.tensor[1], "override bits")};
      }
    }
  }
  QuantizedModel<float> qm(std::move(base), c);
  for (std::size_t l = 0; l < qm.num_layers(); ++l) {
    if (auto p = detail::read_quantizer(list, "wq." + qm.layer_name(l))) qm.set_weight_quantizer(l, *p);
    if (auto p = detail::read_quantizer(list, "aq." + qm.layer_name(l))) qm.set_act_quantizer(l, *p);
  }
  return qm;
}

// calib.meta = [T_sample, c, n, N, strategy, seed limbs x4]
inline TensorList calibration_tensors(const CalibrationSet<float>& set) {
  TensorList out;
  std::vector<float> meta = {static_cast<float>(set.meta.sample_steps),
                             static_cast<float>(set.meta.interval),
                             static_cast<float>(set.meta.per_step),
                             static_cast<float>(set.meta.total),
                             static_cast<float>(static_cast<int>(set.meta.strategy))};
  for (float f : detail::u64_limbs(set.meta.seed)) meta.push_back(f);
  out.push_back({"calib.meta", detail::vec(std::move(meta))});
  out.push_back({"calib.x", set.x});
  std::vector<float> t(set.t.begin(), set.t.end()), idx(set.step_index.begin(), set.step_index.end());
  out.push_back({"calib.t", detail::vec(std::move(t))});
  out.push_back({"calib.step_index", detail::vec(std::move(idx))});
  return out;
}

inline CalibrationSet<float> calibration_from_tensors(const TensorList& list) {
  const Tensor<float>& m = get_tensor(list, "calib.meta");
  require(m.size() == 9, ErrorKind::kIo, "malformed calib.meta");
  CalibrationSet<float> set;
  set.meta.sample_steps = detail::as_int(m[0], "T_sample");
  set.meta.interval = detail::as_int(m[1], "c");
  set.meta.per_step = detail::as_int(m[2], "n");
  set.meta.total = static_cast<std::size_t>(detail::as_int(m[3], "N"));
  const int strategy = detail::as_int(m[4], "strategy");
  require(strategy >= 0 && strategy <= 2, ErrorKind::kIo, "unknown calibration strategy code");
  set.meta.strategy = static_cast<CalibStrategy>(strategy);
  set.meta.seed = detail::from_limbs(m.data() + 5);
  set.x = get_tensor(list, "calib.x");
  for (float f : get_tensor(list, "calib.t").values()) set.t.push_back(detail::as_int(f, "t"));
  for (float f : get_tensor(list, "calib.step_index").values()) {
    set.step_index.push_back(detail::as_int(f, "step index"));
  }
  require(set.x.rows() == set.t.size() && set.t.size() == set.step_index.size() &&
              set.t.size() == set.meta.total,
          ErrorKind::kIo, "calibration set tensors disagree on N");
  return set;
}

}  // namespace qdiff
