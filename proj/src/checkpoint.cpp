// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sherlock/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace sherlock {

namespace {

constexpr const char* kMagic = "SHLK1";

std::string encode_shape(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

Shape decode_shape(const std::string& s) {
  Shape out;
  if (s == "-") return out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoll(part));
  return out;
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  os.write(bytes, 4);
}

float get_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                             static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

void Checkpoint::set(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw CheckpointError("checkpoint header entries cannot contain '=' in keys or newlines: " + key);
  }
  for (auto& [k, v] : header) {
    if (k == key) {
      v = value;
      return;
    }
  }
  header.emplace_back(key, value);
}

std::optional<std::string> Checkpoint::find(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string Checkpoint::get(const std::string& key) const {
  auto v = find(key);
  if (!v) throw CheckpointError("checkpoint is missing header key '" + key + "'");
  return *v;
}

const CheckpointTensor* Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os << kMagic << '\n';
  for (const auto& [k, v] : ckpt.header) os << k << '=' << v << '\n';
  os << "tensors=" << ckpt.tensors.size() << '\n';
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.name.find_first_of(" \n") != std::string::npos) throw CheckpointError("bad tensor name " + t.name);
    if (static_cast<Index>(t.values.size()) != numel(t.shape)) {
      throw CheckpointError("tensor " + t.name + " has " + std::to_string(t.values.size()) + " values for shape " +
                            shape_str(t.shape));
    }
    os << t.name << ' ' << encode_shape(t.shape) << ' ' << offset << '\n';
    offset += t.values.size() * 4;
  }
  os << "end\n";
  for (const auto& t : ckpt.tensors) {
    for (float f : t.values) put_f32(os, f);
  }
  if (!os) throw CheckpointError("error writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMagic) {
    throw CheckpointError(path.string() + " is not a SHLK1 checkpoint");
  }
  Checkpoint ckpt;
  std::size_t count = 0;
  bool have_count = false;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed header line: " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "tensors") {
      count = std::stoull(value);
      have_count = true;
      break;
    }
    ckpt.header.emplace_back(key, value);
  }
  if (!have_count) throw CheckpointError("checkpoint header has no tensor manifest");
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw CheckpointError("truncated tensor manifest");
    std::istringstream ls(line);
    std::string name, shape;
    std::size_t offset = 0;
    if (!(ls >> name >> shape >> offset)) throw CheckpointError("malformed manifest line: " + line);
    ckpt.tensors.push_back({name, decode_shape(shape), {}});
    offsets.push_back(offset);
  }
  if (!std::getline(is, line) || line != "end") throw CheckpointError("missing manifest terminator");
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  for (std::size_t i = 0; i < count; ++i) {
    auto& t = ckpt.tensors[i];
    const auto n = static_cast<std::size_t>(numel(t.shape));
    if (offsets[i] + n * 4 > payload.size()) throw CheckpointError("payload too short for tensor " + t.name);
    t.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) t.values[j] = get_f32(payload.data() + offsets[i] + 4 * j);
  }
  return ckpt;
}

void put_config(Checkpoint& ckpt, const ViTConfig& cfg) {
  ckpt.set("image_size", std::to_string(cfg.image_size));
  ckpt.set("patch_size", std::to_string(cfg.patch_size));
  ckpt.set("in_channels", std::to_string(cfg.in_channels));
  ckpt.set("encoder_dim", std::to_string(cfg.encoder_dim));
  ckpt.set("encoder_blocks", std::to_string(cfg.encoder_blocks));
  ckpt.set("heads", std::to_string(cfg.heads));
  ckpt.set("mlp_ratio", std::to_string(cfg.mlp_ratio));
  ckpt.set("decoder_dim", std::to_string(cfg.decoder_dim));
  ckpt.set("decoder_blocks", std::to_string(cfg.decoder_blocks));
  ckpt.set("use_class_token", cfg.use_class_token ? "1" : "0");
}

ViTConfig get_config(const Checkpoint& ckpt) {
  ViTConfig c;
  auto num = [&](const char* k) { return static_cast<Index>(std::stoll(ckpt.get(k))); };
  c.image_size = num("image_size");
  c.patch_size = num("patch_size");
  c.in_channels = num("in_channels");
  c.encoder_dim = num("encoder_dim");
  c.encoder_blocks = num("encoder_blocks");
  c.heads = num("heads");
  c.mlp_ratio = num("mlp_ratio");
  c.decoder_dim = num("decoder_dim");
  c.decoder_blocks = num("decoder_blocks");
  c.use_class_token = ckpt.get("use_class_token") == "1";
  c.validate();
  return c;
}

template <typename Scalar>
void put_parameters(Checkpoint& ckpt, const ParameterList<Scalar>& params, const std::string& prefix) {
  for (const auto& p : params) {
    CheckpointTensor t{prefix + p.name, p.tensor.shape(), {}};
    t.values.assign(p.tensor.data().data(), p.tensor.data().data() + p.tensor.size());
    ckpt.tensors.push_back(std::move(t));
  }
}

template <typename Scalar>
void load_parameters(const Checkpoint& ckpt, ParameterList<Scalar>& params, const std::string& prefix) {
  for (auto& p : params) {
    const auto* t = ckpt.tensor(prefix + p.name);
    if (!t) throw CheckpointError("checkpoint has no tensor '" + prefix + p.name + "'");
    if (t->shape != p.tensor.shape()) {
      throw CheckpointError("tensor '" + p.name + "' has shape " + shape_str(t->shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
    }
    auto& dst = p.tensor.mutable_data();
    for (Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(t->values[i]);
  }
}

template <typename Scalar>
void put_optimizer(Checkpoint& ckpt, const ParameterList<Scalar>& params, const AdamWState<Scalar>& state,
                   const std::string& tag) {
  ckpt.set(tag + ".step", std::to_string(state.step));
  if (state.m.empty()) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const auto& [which, arr] : {std::pair{"m", &state.m[i]}, std::pair{"v", &state.v[i]}}) {
      CheckpointTensor t{tag + "." + which + "." + params[i].name, params[i].tensor.shape(), {}};
      t.values.assign(arr->data(), arr->data() + arr->size());
      ckpt.tensors.push_back(std::move(t));
    }
  }
}

template <typename Scalar>
AdamWState<Scalar> load_optimizer(const Checkpoint& ckpt, const ParameterList<Scalar>& params,
                                  const std::string& tag) {
  AdamWState<Scalar> state;
  state.step = std::stoll(ckpt.get(tag + ".step"));
  if (state.step == 0) return state;
  for (const auto& p : params) {
    for (const char* which : {"m", "v"}) {
      const auto* t = ckpt.tensor(tag + "." + which + "." + p.name);
      if (!t || t->shape != p.tensor.shape()) {
        throw CheckpointError("optimizer state missing or mismatched for " + p.name);
      }
      typename Tensor<Scalar>::Array a(p.tensor.size());
      for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(t->values[i]);
      (which[0] == 'm' ? state.m : state.v).push_back(std::move(a));
    }
  }
  return state;
}

#define SHERLOCK_INSTANTIATE_CKPT(S)                                                                       \
  template void put_parameters<S>(Checkpoint&, const ParameterList<S>&, const std::string&);               \
  template void load_parameters<S>(const Checkpoint&, ParameterList<S>&, const std::string&);              \
  template void put_optimizer<S>(Checkpoint&, const ParameterList<S>&, const AdamWState<S>&,               \
                                 const std::string&);                                                      \
  template AdamWState<S> load_optimizer<S>(const Checkpoint&, const ParameterList<S>&, const std::string&);

SHERLOCK_INSTANTIATE_CKPT(float)
SHERLOCK_INSTANTIATE_CKPT(double)

}  // namespace sherlock
