#include "marnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace marnet {

const char* to_string(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::io: return "io";
    case CheckpointErrc::bad_magic: return "bad_magic";
    case CheckpointErrc::bad_version: return "bad_version";
    case CheckpointErrc::truncated: return "truncated";
    case CheckpointErrc::trailing_data: return "trailing_data";
    case CheckpointErrc::duplicate_name: return "duplicate_name";
    case CheckpointErrc::bad_entry: return "bad_entry";
    case CheckpointErrc::missing_entry: return "missing_entry";
    case CheckpointErrc::unexpected_entry: return "unexpected_entry";
    case CheckpointErrc::shape_mismatch: return "shape_mismatch";
  }
  return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrc code, const std::string& what)
    : Error(std::string("checkpoint (") + to_string(code) + "): " + what), code_(code) {}

namespace {

constexpr char kMagic[4] = {'M', 'A', 'R', 'C'};
constexpr char kStateMagic[4] = {'T', 'R', 'S', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void string(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void entry(const TensorEntry& e) {
    if (numel(e.shape) != e.data.size() || e.shape.empty()) {
      throw CheckpointError(CheckpointErrc::bad_entry, "entry " + e.name + " has inconsistent extents");
    }
    string(e.name);
    le(static_cast<std::uint32_t>(e.shape.size()));
    for (auto x : e.shape) le(static_cast<std::uint64_t>(x));
    for (float v : e.data) f32(v);
  }
  void entries(const std::vector<TensorEntry>& list) {
    std::set<std::string> seen;
    for (const auto& e : list) {
      if (!seen.insert(e.name).second) throw CheckpointError(CheckpointErrc::duplicate_name, e.name);
    }
    le(static_cast<std::uint32_t>(list.size()));
    for (const auto& e : list) entry(e);
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(CheckpointErrc::truncated, std::string("file ends inside ") + what + " at byte " +
                                                           std::to_string(pos_));
    }
  }
  template <class U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string string(const char* what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  TensorEntry entry() {
    TensorEntry e;
    e.name = string("entry name");
    const auto rank = le<std::uint32_t>("entry rank");
    if (rank == 0 || rank > 8) throw CheckpointError(CheckpointErrc::bad_entry, e.name + ": rank " + std::to_string(rank));
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto x = le<std::uint64_t>("entry extents");
      if (x == 0 || count > (std::uint64_t{1} << 40) / x) {
        throw CheckpointError(CheckpointErrc::bad_entry, e.name + ": implausible extent " + std::to_string(x));
      }
      count *= x;
      e.shape.push_back(static_cast<std::size_t>(x));
    }
    need(count * 4, "entry data");
    e.data.resize(count);
    for (auto& v : e.data) v = std::bit_cast<float>(le<std::uint32_t>("entry data"));
    return e;
  }
  std::vector<TensorEntry> entries() {
    const auto n = le<std::uint32_t>("entry count");
    std::vector<TensorEntry> out;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < n; ++i) {
      out.push_back(entry());
      if (!seen.insert(out.back().name).second) {
        throw CheckpointError(CheckpointErrc::duplicate_name, out.back().name);
      }
    }
    return out;
  }
  void magic(const char (&m)[4], const char* what) {
    need(4, what);
    if (std::memcmp(in_.data() + pos_, m, 4) != 0) throw CheckpointError(CheckpointErrc::bad_magic, what);
    pos_ += 4;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le(Checkpoint::kVersion);
  w.string(c.config_json);
  w.entries(c.parameters);
  w.bytes(kStateMagic, 4);
  w.le(c.state.epoch);
  w.le(c.state.step);
  w.entries(c.state.buffers);
  w.entries(c.state.adam_m);
  w.entries(c.state.adam_v);
  return std::move(w.data());
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic(kMagic, "file magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(CheckpointErrc::bad_version, "version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_json = r.string("config");
  c.parameters = r.entries();
  r.magic(kStateMagic, "training-state magic");
  c.state.epoch = r.le<std::uint64_t>("epoch");
  c.state.step = r.le<std::uint64_t>("step");
  c.state.buffers = r.entries();
  c.state.adam_m = r.entries();
  c.state.adam_v = r.entries();
  if (!r.done()) throw CheckpointError(CheckpointErrc::trailing_data, "bytes after the training state");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = serialize(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointErrc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrc::io, "error while writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

namespace {

template <class T>
TensorEntry to_entry(const std::string& name, const Tensor<T>& t) {
  TensorEntry e;
  e.name = name;
  e.shape = t.shape();
  e.data.reserve(t.size());
  for (T v : t.data()) e.data.push_back(static_cast<float>(v));
  return e;
}

template <class T>
void copy_into(Tensor<T>& t, const TensorEntry& e) {
  if (e.shape != t.shape()) {
    throw CheckpointError(CheckpointErrc::shape_mismatch,
                          e.name + ": stored " + to_string(e.shape) + ", model has " + to_string(t.shape()));
  }
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(e.data[i]);
}

// Copies every named target from the entries; both sides must match exactly.
template <class Target, class Fn>
void restore_all(const std::vector<TensorEntry>& entries, const std::vector<Target>& targets, Fn&& apply,
                 const char* what) {
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::unordered_set<std::string> used;
  for (const auto& t : targets) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw CheckpointError(CheckpointErrc::missing_entry, std::string(what) + " " + t.name);
    apply(t, *it->second);
    used.insert(t.name);
  }
  for (const auto& e : entries) {
    if (!used.count(e.name)) throw CheckpointError(CheckpointErrc::unexpected_entry, std::string(what) + " " + e.name);
  }
}

}  // namespace

template <class T>
Checkpoint capture(Model<T>& model, const Adam<T>* optimizer, std::uint64_t epoch) {
  Checkpoint c;
  c.config_json = to_json(model.config()).dump();
  const auto params = model.parameters();
  for (const auto& p : params) c.parameters.push_back(to_entry(p.name, p.var.value()));
  for (const auto& b : model.buffers()) c.state.buffers.push_back(to_entry(b.name, *b.tensor));
  c.state.epoch = epoch;
  if (optimizer != nullptr) {
    c.state.step = optimizer->steps();
    const auto& moments = optimizer->moments();
    if (moments.size() != params.size()) throw Error("capture: optimizer does not match the model parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (moments[i].m.empty()) continue;
      TensorEntry m{params[i].name, params[i].var.shape(), {}};
      TensorEntry v = m;
      m.data.assign(moments[i].m.begin(), moments[i].m.end());
      v.data.assign(moments[i].v.begin(), moments[i].v.end());
      c.state.adam_m.push_back(std::move(m));
      c.state.adam_v.push_back(std::move(v));
    }
  }
  return c;
}

template <class T>
void restore(Model<T>& model, const Checkpoint& c) {
  restore_all(c.parameters, model.parameters(),
              [](const nn::NamedParameter<T>& p, const TensorEntry& e) {
                auto v = p.var;
                copy_into(v.value(), e);
              },
              "parameter");
  restore_all(c.state.buffers, model.buffers(),
              [](const nn::NamedBuffer<T>& b, const TensorEntry& e) { copy_into(*b.tensor, e); }, "buffer");
}

template <class T>
void restore_optimizer(Adam<T>& optimizer, const Model<T>& model, const Checkpoint& c) {
  const auto params = model.parameters();
  auto& moments = optimizer.moments();
  if (moments.size() != params.size()) throw Error("restore_optimizer: optimizer does not match the model");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;
  for (auto& m : moments) {
    m.m.clear();
    m.v.clear();
  }
  if (c.state.adam_m.size() != c.state.adam_v.size()) {
    throw CheckpointError(CheckpointErrc::bad_entry, "adam first and second moments differ in count");
  }
  for (std::size_t k = 0; k < c.state.adam_m.size(); ++k) {
    const auto& em = c.state.adam_m[k];
    const auto& ev = c.state.adam_v[k];
    auto it = index.find(em.name);
    if (it == index.end() || ev.name != em.name) {
      throw CheckpointError(CheckpointErrc::unexpected_entry, "adam moment " + em.name);
    }
    const auto& p = params[it->second];
    if (em.shape != p.var.shape() || ev.shape != p.var.shape()) {
      throw CheckpointError(CheckpointErrc::shape_mismatch, "adam moment " + em.name);
    }
    moments[it->second].m.assign(em.data.begin(), em.data.end());
    moments[it->second].v.assign(ev.data.begin(), ev.data.end());
  }
  optimizer.set_steps(c.state.step);
}

template <class T>
Model<T> load_model(const Checkpoint& c) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::bad_entry, std::string("config: ") + e.what());
  }
  Model<T> model(model_config_from_json(j), 0);
  restore(model, c);
  return model;
}

template Checkpoint capture<float>(Model<float>&, const Adam<float>*, std::uint64_t);
template Checkpoint capture<double>(Model<double>&, const Adam<double>*, std::uint64_t);
template void restore<float>(Model<float>&, const Checkpoint&);
template void restore<double>(Model<double>&, const Checkpoint&);
template void restore_optimizer<float>(Adam<float>&, const Model<float>&, const Checkpoint&);
template void restore_optimizer<double>(Adam<double>&, const Model<double>&, const Checkpoint&);
template Model<float> load_model<float>(const Checkpoint&);
template Model<double> load_model<double>(const Checkpoint&);

}  // namespace marnet
