#include "blockflow/checkpoint.hpp"

#include "blockflow/io.hpp"

namespace blockflow {

std::map<std::string, Tensor> Checkpoint::tensor_map() const {
  std::map<std::string, Tensor> m;
  for (const auto& [name, t] : tensors) m.emplace(name, t);
  return m;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.component.size()));
  out += ckpt.component;
  std::string cfg = ckpt.config.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw ValidationError("checkpoint: bad magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.component = r.bytes(r.u32());
  try {
    c.config = nlohmann::json::parse(r.bytes(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: config block: ") + e.what());
  }
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.f64();
    c.tensors.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
  }
  if (!r.done()) throw ValidationError("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_component) {
  Checkpoint c = decode_checkpoint(read_file(path));
  if (!expected_component.empty() && c.component != expected_component) {
    throw ValidationError(path.string() + ": expected a '" + expected_component + "' checkpoint, found '" + c.component + "'");
  }
  return c;
}

}  // namespace blockflow
