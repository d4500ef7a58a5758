#pragma once
// Parameter checkpoints ("OFCK") and Adam state ("OFOS").
//
//   OFCK: magic | u32 count | count x (u32 name_len | name | 4 x u32 shape | f32 payload)
//   OFOS: magic | u32 step  | u32 count | count x (u32 name_len | name | 4 x u32 shape | f32 m | f32 v)
//
// All integers and floats little-endian.

#include <filesystem>
#include <string>

#include "octflow/autodiff/optim.hpp"
#include "octflow/autodiff/tensor.hpp"
#include "octflow/field.hpp"

namespace octflow::ad {

namespace detail {

inline void put_header(Bytes& out, const std::string& name, const Shape& s) {
  le::put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  for (int e : {s.n, s.c, s.h, s.w}) le::put_u32(out, static_cast<std::uint32_t>(e));
}

inline std::pair<std::string, Shape> get_header(le::Reader& r) {
  const std::uint32_t len = r.u32("name length");
  const auto raw = r.raw(len, "name");
  std::string name(reinterpret_cast<const char*>(raw.data()), raw.size());
  Shape s;
  s.n = static_cast<int>(r.u32("shape"));
  s.c = static_cast<int>(r.u32("shape"));
  s.h = static_cast<int>(r.u32("shape"));
  s.w = static_cast<int>(r.u32("shape"));
  if (!s.positive()) throw FormatError("checkpoint tensor '" + name + "' has a zero extent");
  return {std::move(name), s};
}

template <typename T>
void put_payload(Bytes& out, const Tensor<T>& t) {
  for (T v : t.data) le::put_f32(out, static_cast<float>(v));
}

template <typename T>
void get_payload(le::Reader& r, Tensor<T>& t) {
  for (auto& v : t.data) v = static_cast<T>(r.f32("payload"));
}

}  // namespace detail

template <typename T>
Bytes encode_checkpoint(const ParameterSet<T>& params) {
  Bytes out;
  le::put_magic(out, "OFCK");
  le::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::put_header(out, params[i].name, params[i].value.shape);
    detail::put_payload(out, params[i].value);
  }
  return out;
}

// Loads values into an existing parameter set; every stored tensor must
// exist with the same shape, and every parameter must be covered.
template <typename T>
void decode_checkpoint_into(std::span<const std::uint8_t> bytes, ParameterSet<T>& params) {
  le::Reader r(bytes);
  r.expect_magic("OFCK");
  const std::uint32_t count = r.u32("count");
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model has " + std::to_string(params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, shape] = detail::get_header(r);
    Parameter<T>* p = params.find(name);
    if (!p) throw FormatError("checkpoint tensor '" + name + "' is not a model parameter");
    if (p->value.shape != shape) throw FormatError("checkpoint tensor '" + name + "' has shape " + shape.str());
    detail::get_payload(r, p->value);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
}

template <typename T>
Bytes encode_optimizer_state(const AdamState<T>& st) {
  Bytes out;
  le::put_magic(out, "OFOS");
  le::put_u32(out, static_cast<std::uint32_t>(st.step));
  le::put_u32(out, static_cast<std::uint32_t>(st.moments.size()));
  for (const auto& [name, mv] : st.moments) {
    detail::put_header(out, name, mv.first.shape);
    detail::put_payload(out, mv.first);
    detail::put_payload(out, mv.second);
  }
  return out;
}

template <typename T>
AdamState<T> decode_optimizer_state(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("OFOS");
  AdamState<T> st;
  st.step = r.u32("step");
  const std::uint32_t count = r.u32("count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, shape] = detail::get_header(r);
    Tensor<T> m(shape), v(shape);
    detail::get_payload(r, m);
    detail::get_payload(r, v);
    st.moments.emplace(std::move(name), std::make_pair(std::move(m), std::move(v)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after optimizer state");
  return st;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& p, const ParameterSet<T>& params) {
  write_file(p, encode_checkpoint(params));
}
template <typename T>
void load_checkpoint(const std::filesystem::path& p, ParameterSet<T>& params) {
  decode_checkpoint_into(read_file(p), params);
}

}  // namespace octflow::ad
