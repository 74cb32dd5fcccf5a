#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "g2b/cil.hpp"

namespace g2b {

// Little-endian binary writer/reader for checkpoints. Float payloads are
// written as raw IEEE bytes so a resumed run restarts from bit-identical
// state.

namespace detail {

struct BinWriter {
  std::ofstream out;
  explicit BinWriter(const std::string& path)
      : out(path, std::ios::binary | std::ios::trunc) {
    if (!out) throw IoError(cat("cannot open for write: ", path));
  }
  template <class T>
  void pod(const T& x) {
    out.write(reinterpret_cast<const char*>(&x), sizeof(T));
  }
  void bytes(const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) {
    pod<uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(float));
  }
  void ints(const std::vector<int>& v) {
    pod<uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(int));
  }
};

struct BinReader {
  std::ifstream in;
  std::string path;
  explicit BinReader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError(cat("cannot open for read: ", p));
  }
  template <class T>
  T pod() {
    T x;
    in.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!in) throw IoError(cat("truncated checkpoint: ", path));
    return x;
  }
  void bytes(void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in) throw IoError(cat("truncated checkpoint: ", path));
  }
  std::string str() {
    auto n = pod<uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<float> floats() {
    auto n = pod<uint64_t>();
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }
  std::vector<int> ints() {
    auto n = pod<uint64_t>();
    std::vector<int> v(n);
    bytes(v.data(), n * sizeof(int));
    return v;
  }
};

}  // namespace detail

inline void atomic_rename(const std::string& tmp, const std::string& path) {
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(cat("rename ", tmp, " -> ", path, ": ", ec.message()));
}

// Writes `content` to path via a temp file + rename.
inline void atomic_write_text(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError(cat("cannot open for write: ", tmp));
    out << content;
  }
  atomic_rename(tmp, path);
}

constexpr char kCheckpointMagic[8] = {'G', '2', 'B', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  uint64_t config_hash = 0;
  int rounds_completed = 0;
  // model state
  std::vector<std::pair<std::string, std::vector<float>>> params;
  std::vector<std::pair<std::string, std::vector<float>>> buffers;
  Shape head_w_shape;  // head grows across rounds; shape travels with data
  // memory state
  int64_t memory_budget = 0;
  struct MemClass {
    int class_id;
    std::vector<int> source_indices;
    std::vector<std::vector<float>> images;
  };
  std::vector<MemClass> memory;
  // progress record (JSON, schema owned by experiment.hpp)
  std::string record_json;
};

inline void capture_model(G2bModel<float>& model, Checkpoint& ck) {
  auto refs = model.params();
  ck.params.clear();
  ck.buffers.clear();
  for (auto* p : refs.params) ck.params.emplace_back(p->name, p->value.v);
  for (auto& [name, t] : refs.buffers) ck.buffers.emplace_back(name, t->v);
  ck.head_w_shape = model.backbone.head.w.value.shape;
}

// Restores parameter and buffer payloads by name. The head is resized first
// so row counts line up with the checkpointed round.
inline void restore_model(G2bModel<float>& model, const Checkpoint& ck) {
  auto& head = model.backbone.head;
  if (ck.head_w_shape.size() != 2 ||
      ck.head_w_shape[1] != head.in_features())
    throw ResumeMismatch("checkpoint head shape incompatible with model");
  head.w.value = Tensor<float>(ck.head_w_shape);
  head.b.value = Tensor<float>({ck.head_w_shape[0]});
  head.w.zero_grad();
  head.b.zero_grad();

  auto refs = model.params();
  std::map<std::string, Param<float>*> by_name;
  for (auto* p : refs.params) by_name[p->name] = p;
  for (const auto& [name, data] : ck.params) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ResumeMismatch(cat("checkpoint param '", name,
                               "' not present in model"));
    if (it->second->value.v.size() != data.size())
      throw ResumeMismatch(cat("checkpoint param '", name, "' has ",
                               data.size(), " values, model expects ",
                               it->second->value.v.size()));
    it->second->value.v = data;
  }
  if (ck.params.size() != by_name.size())
    throw ResumeMismatch("checkpoint param count differs from model");

  std::map<std::string, Tensor<float>*> buf_by_name;
  for (auto& [name, t] : refs.buffers) buf_by_name[name] = t;
  for (const auto& [name, data] : ck.buffers) {
    auto it = buf_by_name.find(name);
    if (it == buf_by_name.end())
      throw ResumeMismatch(cat("checkpoint buffer '", name, "' unknown"));
    if (it->second->v.size() != data.size())
      throw ResumeMismatch(cat("checkpoint buffer '", name, "' size mismatch"));
    it->second->v = data;
  }
}

inline void capture_memory(const ExemplarMemory& mem, Checkpoint& ck) {
  ck.memory_budget = mem.budget;
  ck.memory.clear();
  for (const auto& [cls, samples] : mem.store) {
    Checkpoint::MemClass mc;
    mc.class_id = cls;
    for (const auto& s : samples) {
      mc.source_indices.push_back(s.source_index);
      mc.images.push_back(s.image);
    }
    ck.memory.push_back(std::move(mc));
  }
}

inline ExemplarMemory restore_memory(const Checkpoint& ck) {
  ExemplarMemory mem(ck.memory_budget);
  for (const auto& mc : ck.memory) {
    auto& slot = mem.store[mc.class_id];
    for (size_t i = 0; i < mc.images.size(); ++i) {
      StoredSample s;
      s.class_id = mc.class_id;
      s.source_index = mc.source_indices[i];
      s.image = mc.images[i];
      slot.push_back(std::move(s));
    }
  }
  return mem;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    detail::BinWriter w(tmp);
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.pod<uint32_t>(kCheckpointVersion);
    w.pod<uint64_t>(ck.config_hash);
    w.pod<int32_t>(ck.rounds_completed);

    w.pod<uint32_t>(static_cast<uint32_t>(ck.head_w_shape.size()));
    for (int d : ck.head_w_shape) w.pod<int32_t>(d);

    w.pod<uint32_t>(static_cast<uint32_t>(ck.params.size()));
    for (const auto& [name, data] : ck.params) {
      w.str(name);
      w.floats(data);
    }
    w.pod<uint32_t>(static_cast<uint32_t>(ck.buffers.size()));
    for (const auto& [name, data] : ck.buffers) {
      w.str(name);
      w.floats(data);
    }

    w.pod<int64_t>(ck.memory_budget);
    w.pod<uint32_t>(static_cast<uint32_t>(ck.memory.size()));
    for (const auto& mc : ck.memory) {
      w.pod<int32_t>(mc.class_id);
      w.ints(mc.source_indices);
      w.pod<uint32_t>(static_cast<uint32_t>(mc.images.size()));
      for (const auto& img : mc.images) w.floats(img);
    }

    w.str(ck.record_json);
    if (!w.out) throw IoError(cat("write failed: ", tmp));
  }
  atomic_rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::BinReader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError(cat("not a checkpoint file: ", path));
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(cat("unsupported checkpoint version ", version, " in ", path));
  Checkpoint ck;
  ck.config_hash = r.pod<uint64_t>();
  ck.rounds_completed = r.pod<int32_t>();

  const auto rank = r.pod<uint32_t>();
  for (uint32_t i = 0; i < rank; ++i) ck.head_w_shape.push_back(r.pod<int32_t>());

  const auto np = r.pod<uint32_t>();
  for (uint32_t i = 0; i < np; ++i) {
    auto name = r.str();
    ck.params.emplace_back(std::move(name), r.floats());
  }
  const auto nb = r.pod<uint32_t>();
  for (uint32_t i = 0; i < nb; ++i) {
    auto name = r.str();
    ck.buffers.emplace_back(std::move(name), r.floats());
  }

  ck.memory_budget = r.pod<int64_t>();
  const auto nc = r.pod<uint32_t>();
  for (uint32_t i = 0; i < nc; ++i) {
    Checkpoint::MemClass mc;
    mc.class_id = r.pod<int32_t>();
    mc.source_indices = r.ints();
    const auto ns = r.pod<uint32_t>();
    for (uint32_t s = 0; s < ns; ++s) mc.images.push_back(r.floats());
    ck.memory.push_back(std::move(mc));
  }
  ck.record_json = r.str();
  return ck;
}

}  // namespace g2b
