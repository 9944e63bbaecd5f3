// Copyright (c) 2026 the bcssl authors. All rights reserved.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <filesystem>
#include <map>

#include "bcssl/dino.hpp"

// Train-state checkpointing. Format (little-endian):
//   magic "BCSL" | version u32 = 1 | config-hash u64 |
//   step u64 | epoch u32 | seed u64 | center length u32 | center f32 data |
//   tensor count u32 | per tensor:
//     name length u16 | name bytes | ndim u8 | dims u32 x ndim | role u8 |
//     f32 payload
// Roles: 0 value, 1 Adam first moment, 2 Adam second moment, 3 BN running
// mean, 4 BN running variance. Student parameters carry roles 0-2; teacher
// parameters carry role 0 only (no optimizer state). Tensor order is fixed,
// so save -> load -> save is byte-identical.

namespace bcssl {

inline constexpr char kCheckpointMagic[4] = {'B', 'C', 'S', 'L'};
inline constexpr uint32_t kCheckpointVersion = 1;

enum class TensorRole : uint8_t { value = 0, moment_m = 1, moment_v = 2, running_mean = 3, running_var = 4 };

// Hash of every architecture-defining field; checkpoints are only loadable
// into a model built from the same configuration.
inline uint64_t config_hash(const BackboneConfig& bc, const DinoHeadConfig& hc) {
  const std::string s = detail::strf(
      "bb:%s|d%d,%d,%d,%d|c%d,%d,%d,%d|k%d|bn%d|p%d|ls%.12g|dp%.12g|bm%.12g|be%.12g|ln%.12g;"
      "head:%d,%d,%d,%d|g%d",
      bc.variant.c_str(), bc.depths[0], bc.depths[1], bc.depths[2], bc.depths[3], bc.dims[0], bc.dims[1], bc.dims[2],
      bc.dims[3], bc.kernel_size, (int)bc.use_bn_after_dw, bc.stem_patch, bc.layer_scale_init, bc.drop_path_rate,
      bc.bn_momentum, bc.bn_eps, bc.ln_eps, hc.in_dim, hc.hidden_dim, hc.bottleneck_dim, hc.out_dim,
      (int)hc.trainable_last_gain);
  return fnv1a(s);
}

namespace detail {

inline void write_tensor_record(BinaryWriter& w, const std::string& name, const std::vector<int>& shape,
                                const float* data, int64_t numel, TensorRole role) {
  if (name.size() > 0xffff) throw io_error("checkpoint tensor name too long");
  w.write_u16((uint16_t)name.size());
  w.write_bytes(name.data(), name.size());
  w.write_u8((uint8_t)shape.size());
  for (int d : shape) w.write_u32((uint32_t)d);
  w.write_u8((uint8_t)role);
  w.write_bytes(data, (uint64_t)numel * 4);
}

template <typename S>
struct TensorSlot {
  Tensor<S>* tensor;
  TensorRole role;
};

// The full tensor manifest of a train state, in fixed order: student
// parameters (value, m, v), student BN stats, teacher parameters (value),
// teacher BN stats.
template <typename S>
std::vector<std::pair<std::string, TensorSlot<S>>> checkpoint_manifest(TrainState<S>& st) {
  std::vector<std::pair<std::string, TensorSlot<S>>> out;
  for (auto* p : st.student.all_params()) {
    out.emplace_back("student." + p->name, TensorSlot<S>{&p->value, TensorRole::value});
    out.emplace_back("student." + p->name, TensorSlot<S>{&p->opt_m, TensorRole::moment_m});
    out.emplace_back("student." + p->name, TensorSlot<S>{&p->opt_v, TensorRole::moment_v});
  }
  for (auto& [name, buf] : st.student.backbone.buffers()) {
    const bool mean = name.find("running_mean") != std::string::npos;
    out.emplace_back("student." + name, TensorSlot<S>{buf, mean ? TensorRole::running_mean : TensorRole::running_var});
  }
  for (auto* p : st.teacher.all_params()) {
    out.emplace_back("teacher." + p->name, TensorSlot<S>{&p->value, TensorRole::value});
  }
  for (auto& [name, buf] : st.teacher.backbone.buffers()) {
    const bool mean = name.find("running_mean") != std::string::npos;
    out.emplace_back("teacher." + name, TensorSlot<S>{buf, mean ? TensorRole::running_mean : TensorRole::running_var});
  }
  return out;
}

}  // namespace detail

// Atomic save: writes to <path>.tmp, then renames. On failure the partial
// file is removed and the error rethrown.
template <typename S>
void save_checkpoint(TrainState<S>& st, const std::string& path) {
  const std::string tmp = path + ".tmp";
  try {
    BinaryWriter w(tmp);
    w.write_magic(kCheckpointMagic);
    w.write_u32(kCheckpointVersion);
    w.write_u64(config_hash(st.student.backbone.cfg, st.student.head.cfg));
    w.write_u64((uint64_t)st.step);
    w.write_u32((uint32_t)st.epoch);
    w.write_u64(st.seed);
    w.write_u32((uint32_t)st.center.numel());
    std::vector<float> f32;
    auto payload = [&](const Tensor<S>& t) {
      f32.resize((size_t)t.numel());
      for (int64_t i = 0; i < t.numel(); ++i) f32[(size_t)i] = (float)t.data[(size_t)i];
      return f32.data();
    };
    w.write_bytes(payload(st.center), (uint64_t)st.center.numel() * 4);
    auto manifest = detail::checkpoint_manifest(st);
    w.write_u32((uint32_t)manifest.size());
    for (auto& [name, slot] : manifest) {
      detail::write_tensor_record(w, name, slot.tensor->shape, payload(*slot.tensor), slot.tensor->numel(), slot.role);
    }
    w.close();
  } catch (...) {
    std::remove(tmp.c_str());
    throw;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw io_error("cannot move checkpoint into place at '" + path + "': " + ec.message());
  }
}

// Loads a checkpoint into a state built from the same configuration. All
// tensors must match the model's manifest in name, role, and shape; a
// mismatched configuration is rejected with a named-tensor diff and leaves
// the state untouched. Parsed tensors are staged and applied only once the
// whole file has validated.
template <typename S>
void load_checkpoint(TrainState<S>& st, const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kCheckpointMagic);
  uint64_t at = r.offset();
  const uint32_t version = r.read_u32("version");
  if (version != kCheckpointVersion) {
    throw parse_error(detail::strf("unsupported checkpoint version %u (expected %u)", version, kCheckpointVersion),
                      at);
  }
  const uint64_t hash_at = r.offset();
  const uint64_t hash = r.read_u64("config hash");
  const uint64_t expect_hash = config_hash(st.student.backbone.cfg, st.student.head.cfg);

  const uint64_t step = r.read_u64("step");
  const uint32_t epoch = r.read_u32("epoch");
  const uint64_t seed = r.read_u64("seed");
  const uint64_t center_at = r.offset();
  const uint32_t center_len = r.read_u32("center length");
  if (hash == expect_hash && (int64_t)center_len != st.center.numel()) {
    throw parse_error(detail::strf("center length %u != model prototype count %lld", center_len,
                                   (long long)st.center.numel()),
                      center_at);
  }
  std::vector<float> center((size_t)center_len);
  r.read_bytes(center.data(), (uint64_t)center_len * 4, "center data");

  auto manifest = detail::checkpoint_manifest(st);
  using Key = std::pair<std::string, uint8_t>;
  std::map<Key, detail::TensorSlot<S>*> slots;
  for (auto& [name, slot] : manifest) slots[{name, (uint8_t)slot.role}] = &slot;

  const uint32_t count = r.read_u32("tensor count");
  std::vector<std::string> unexpected;
  std::map<Key, std::vector<float>> staged;
  for (uint32_t i = 0; i < count; ++i) {
    at = r.offset();
    const uint16_t name_len = r.read_u16("tensor name length");
    std::string name((size_t)name_len, '\0');
    r.read_bytes(name.data(), name_len, "tensor name");
    const uint8_t ndim = r.read_u8("tensor rank");
    if (ndim > 8) throw parse_error(detail::strf("tensor '%s' rank %u exceeds limit 8", name.c_str(), ndim), at);
    std::vector<int> shape(ndim);
    uint64_t numel = 1;
    for (auto& d : shape) {
      d = (int)r.read_u32("tensor dim");
      if (d < 1) throw parse_error(detail::strf("tensor '%s' has non-positive dim", name.c_str()), at);
      // Keep numel * 4 representable so the size check below cannot wrap.
      if (numel > (UINT64_MAX / 4) / (uint64_t)d) {
        throw parse_error(detail::strf("tensor '%s' dimensions overflow the element count", name.c_str()), at);
      }
      numel *= (uint64_t)d;
    }
    const uint8_t role = r.read_u8("tensor role");
    if (numel * 4 > r.remaining()) {
      throw parse_error(detail::strf("tensor '%s' payload (%llu bytes) exceeds remaining file size", name.c_str(),
                                     (unsigned long long)(numel * 4)),
                        r.offset());
    }
    std::vector<float> buf((size_t)numel);
    r.read_bytes(buf.data(), numel * 4, "tensor payload");

    auto it = slots.find({name, role});
    if (it == slots.end()) {
      unexpected.push_back(name + "#" + std::to_string(role));
      continue;
    }
    if (hash == expect_hash && it->second->tensor->shape != shape) {
      std::string got;
      for (int d : shape) got += (got.empty() ? "" : "x") + std::to_string(d);
      throw parse_error(detail::strf("tensor '%s' shape [%s] does not match the model", name.c_str(), got.c_str()),
                        at);
    }
    staged[{name, role}] = std::move(buf);
  }
  r.expect_eof();

  std::vector<std::string> missing;
  for (auto& [key, slot] : slots) {
    if (!staged.count(key)) missing.push_back(key.first + "#" + std::to_string(key.second));
  }
  if (hash != expect_hash || !missing.empty() || !unexpected.empty()) {
    auto head_of = [](const std::vector<std::string>& v) {
      std::string s;
      for (size_t i = 0; i < v.size() && i < 4; ++i) s += (i ? ", " : "") + v[i];
      if (v.size() > 4) s += detail::strf(", ... (%zu total)", v.size());
      return s.empty() ? std::string("none") : s;
    };
    throw parse_error(detail::strf("checkpoint does not match the model configuration (hash %016llx vs %016llx); "
                                   "tensors missing from checkpoint: %s; tensors not in model: %s",
                                   (unsigned long long)hash, (unsigned long long)expect_hash,
                                   head_of(missing).c_str(), head_of(unexpected).c_str()),
                      hash_at);
  }

  for (auto& [key, slot] : slots) {
    const std::vector<float>& buf = staged[key];
    for (size_t j = 0; j < buf.size(); ++j) slot->tensor->data[j] = (S)buf[j];
  }
  for (int64_t i = 0; i < st.center.numel(); ++i) st.center.data[(size_t)i] = (S)center[(size_t)i];
  st.step = (int64_t)step;
  st.epoch = (int64_t)epoch;
  st.seed = seed;
}

}  // namespace bcssl
