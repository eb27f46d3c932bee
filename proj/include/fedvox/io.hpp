#pragma once

// On-disk formats. Volumes are raw little-endian float32 with a plain-text
// sidecar; checkpoints are a single binary file carrying the full experiment
// config (as JSON text) plus the final and best model states. Every reader
// bound-checks and names the field it was reading, so corrupt files fail
// loudly instead of producing garbage models.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedvox/common.hpp"
#include "fedvox/params.hpp"
#include "fedvox/volume.hpp"

namespace fedvox {

static_assert(std::endian::native == std::endian::little,
              "raw volume and checkpoint formats assume a little-endian host");

// Shortest round-trip decimal form; locale-independent, so identical runs
// write identical bytes.
inline std::string fmt_num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline Modality parse_modality(const std::string& s) {
  for (Modality m : {Modality::MR, Modality::CT, Modality::Mask}) {
    if (s == modality_name(m)) return m;
  }
  fail_runtime(cat("volume meta: unknown modality '", s, "'"));
}

// ---------------------------------------------------------------------------
// Raw volumes: <stem>.f32 (data, x fastest) + <stem>.meta (grid description).

inline void save_volume(const std::filesystem::path& stem, const Volume<float>& v) {
  FV_CHECK(v.numel() > 0 && size_t(v.numel()) == v.data.size(),
           "save_volume: volume data does not match its dims");
  std::filesystem::path raw_path = stem;
  raw_path += ".f32";
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  FV_RUNTIME_CHECK(raw.is_open(), "cannot open for writing: ", raw_path.string());
  raw.write(reinterpret_cast<const char*>(v.data.data()),
            std::streamsize(v.data.size() * sizeof(float)));
  FV_RUNTIME_CHECK(raw.good(), "write failed: ", raw_path.string());
  raw.close();

  std::filesystem::path meta_path = stem;
  meta_path += ".meta";
  std::ostringstream meta;
  meta << "dims " << v.dims[0] << ' ' << v.dims[1] << ' ' << v.dims[2] << '\n'
       << "spacing " << fmt_num(v.spacing[0]) << ' ' << fmt_num(v.spacing[1]) << ' '
       << fmt_num(v.spacing[2]) << '\n'
       << "orientation " << v.orientation[0] << ' ' << v.orientation[1] << ' '
       << v.orientation[2] << '\n'
       << "modality " << modality_name(v.modality) << '\n';
  std::ofstream mf(meta_path, std::ios::trunc);
  FV_RUNTIME_CHECK(mf.is_open(), "cannot open for writing: ", meta_path.string());
  mf << meta.str();
  FV_RUNTIME_CHECK(mf.good(), "write failed: ", meta_path.string());
}

inline Volume<float> load_volume(const std::filesystem::path& stem) {
  std::filesystem::path meta_path = stem;
  meta_path += ".meta";
  std::ifstream mf(meta_path);
  FV_RUNTIME_CHECK(mf.is_open(), "cannot open volume meta: ", meta_path.string());

  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{0.0, 0.0, 0.0};
  std::array<int32_t, 3> orientation{-1, -1, -1};
  Modality modality = Modality::MR;
  bool got_dims = false, got_spacing = false, got_orientation = false, got_modality = false;

  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dims") {
      ls >> dims[0] >> dims[1] >> dims[2];
      got_dims = !ls.fail();
      FV_RUNTIME_CHECK(got_dims, "volume meta: malformed dims line in ", meta_path.string());
    } else if (key == "spacing") {
      ls >> spacing[0] >> spacing[1] >> spacing[2];
      got_spacing = !ls.fail();
      FV_RUNTIME_CHECK(got_spacing, "volume meta: malformed spacing line in ", meta_path.string());
    } else if (key == "orientation") {
      ls >> orientation[0] >> orientation[1] >> orientation[2];
      got_orientation = !ls.fail();
      FV_RUNTIME_CHECK(got_orientation, "volume meta: malformed orientation line in ",
                       meta_path.string());
    } else if (key == "modality") {
      std::string name;
      ls >> name;
      modality = parse_modality(name);
      got_modality = true;
    } else {
      fail_runtime(cat("volume meta: unknown field '", key, "' in ", meta_path.string()));
    }
  }
  FV_RUNTIME_CHECK(got_dims && got_spacing && got_orientation && got_modality,
                   "volume meta: missing fields in ", meta_path.string(),
                   " (need dims, spacing, orientation, modality)");
  FV_RUNTIME_CHECK(dims[0] > 0 && dims[1] > 0 && dims[2] > 0,
                   "volume meta: dims must be positive in ", meta_path.string());
  FV_RUNTIME_CHECK(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
                   "volume meta: spacing must be positive in ", meta_path.string());
  bool seen[3] = {false, false, false};
  for (int32_t o : orientation) {
    FV_RUNTIME_CHECK(o >= 0 && o < 3 && !seen[o],
                     "volume meta: orientation must be a permutation of 0 1 2 in ",
                     meta_path.string());
    seen[o] = true;
  }

  Volume<float> v(dims, spacing, modality);
  v.orientation = orientation;

  std::filesystem::path raw_path = stem;
  raw_path += ".f32";
  std::ifstream raw(raw_path, std::ios::binary | std::ios::ate);
  FV_RUNTIME_CHECK(raw.is_open(), "cannot open raw volume: ", raw_path.string());
  const auto size = static_cast<uint64_t>(raw.tellg());
  const uint64_t expected = uint64_t(v.numel()) * sizeof(float);
  FV_RUNTIME_CHECK(size == expected, "raw volume size mismatch for ", raw_path.string(),
                   ": expected ", expected, " bytes, got ", size);
  raw.seekg(0);
  raw.read(reinterpret_cast<char*>(v.data.data()), std::streamsize(expected));
  FV_RUNTIME_CHECK(raw.good(), "read failed: ", raw_path.string());
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct CheckpointData {
  std::string config_json;  // full experiment config, round-trippable
  bool per_plane_models = false;
  int64_t best_round = 0;
  double best_unseen_mae = 0.0;
  std::vector<NamedParameterSet<float>> final_states;
  std::vector<NamedParameterSet<float>> best_states;
};

namespace detail {

constexpr char kCkptMagic[8] = {'F', 'V', 'O', 'X', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

struct ByteWriter {
  std::ofstream f;
  explicit ByteWriter(const std::filesystem::path& p) : f(p, std::ios::binary | std::ios::trunc) {
    FV_RUNTIME_CHECK(f.is_open(), "cannot open for writing: ", p.string());
  }
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, size_t n) { f.write(static_cast<const char*>(p), std::streamsize(n)); }
};

struct ByteReader {
  std::string buf;
  size_t pos = 0;
  explicit ByteReader(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary | std::ios::ate);
    FV_RUNTIME_CHECK(f.is_open(), "cannot open checkpoint: ", p.string());
    buf.resize(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(buf.data(), std::streamsize(buf.size()));
    FV_RUNTIME_CHECK(f.good(), "read failed: ", p.string());
  }
  template <typename T>
  T take(const char* field) {
    static_assert(std::is_trivially_copyable_v<T>);
    FV_RUNTIME_CHECK(pos + sizeof(T) <= buf.size(), "checkpoint: truncated reading ", field);
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string take_string(const char* field, uint64_t n) {
    FV_RUNTIME_CHECK(pos + n <= buf.size(), "checkpoint: truncated reading ", field);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

inline void write_states(ByteWriter& w, const std::vector<NamedParameterSet<float>>& states) {
  w.put<uint32_t>(uint32_t(states.size()));
  for (const auto& st : states) {
    w.put<uint32_t>(uint32_t(st.items.size()));
    for (const auto& [name, p] : st.items) {
      w.put<uint32_t>(uint32_t(name.size()));
      w.bytes(name.data(), name.size());
      w.put<uint8_t>(uint8_t(p.tag.kind));
      w.put<int32_t>(p.tag.layer_index);
      w.put<uint32_t>(uint32_t(p.value.shape.size()));
      for (int64_t e : p.value.shape) w.put<int64_t>(e);
      w.bytes(p.value.data.data(), p.value.data.size() * sizeof(float));
    }
  }
}

inline std::vector<NamedParameterSet<float>> read_states(ByteReader& r, const char* group) {
  const uint32_t n_models = r.take<uint32_t>("model count");
  FV_RUNTIME_CHECK(n_models >= 1 && n_models <= 16, "checkpoint: implausible model count ",
                   n_models, " in ", group, " states");
  std::vector<NamedParameterSet<float>> states;
  states.reserve(n_models);
  for (uint32_t m = 0; m < n_models; ++m) {
    const uint32_t n_params = r.take<uint32_t>("parameter count");
    FV_RUNTIME_CHECK(n_params >= 1 && n_params <= 1u << 20, "checkpoint: implausible parameter count ",
                     n_params, " in ", group, " states");
    NamedParameterSet<float> st;
    for (uint32_t j = 0; j < n_params; ++j) {
      const uint32_t name_len = r.take<uint32_t>("parameter name length");
      FV_RUNTIME_CHECK(name_len >= 1 && name_len <= 4096,
                       "checkpoint: implausible parameter name length ", name_len);
      const std::string name = r.take_string("parameter name", name_len);
      const uint8_t kind = r.take<uint8_t>("parameter kind");
      FV_RUNTIME_CHECK(kind <= uint8_t(ParamKind::BNRunningVar),
                       "checkpoint: invalid parameter kind ", uint32_t(kind), " for ", name);
      const int32_t layer_index = r.take<int32_t>("layer index");
      const uint32_t rank = r.take<uint32_t>("tensor rank");
      FV_RUNTIME_CHECK(rank >= 1 && rank <= 8, "checkpoint: implausible tensor rank ", rank,
                       " for ", name);
      std::vector<int64_t> shape(rank);
      int64_t numel = 1;
      for (uint32_t d = 0; d < rank; ++d) {
        shape[d] = r.take<int64_t>("tensor extent");
        FV_RUNTIME_CHECK(shape[d] >= 1 && shape[d] <= (int64_t(1) << 32),
                         "checkpoint: implausible tensor extent ", shape[d], " for ", name);
        numel *= shape[d];
        FV_RUNTIME_CHECK(numel <= (int64_t(1) << 32), "checkpoint: implausible tensor size for ",
                         name);
      }
      Parameter<float> p{Tensor<float>(shape), LayerTag{ParamKind(kind), layer_index}};
      const size_t nbytes = size_t(numel) * sizeof(float);
      FV_RUNTIME_CHECK(r.pos + nbytes <= r.buf.size(), "checkpoint: truncated tensor data for ",
                       name);
      std::memcpy(p.value.data.data(), r.buf.data() + r.pos, nbytes);
      r.pos += nbytes;
      st.append(name, std::move(p));
    }
    states.push_back(std::move(st));
  }
  return states;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  FV_CHECK(!ck.final_states.empty() && ck.final_states.size() == ck.best_states.size(),
           "save_checkpoint: final and best state groups must be non-empty and equally sized");
  detail::ByteWriter w(path);
  w.bytes(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  w.put<uint32_t>(detail::kCkptVersion);
  w.put<uint64_t>(ck.config_json.size());
  w.bytes(ck.config_json.data(), ck.config_json.size());
  w.put<uint8_t>(ck.per_plane_models ? 1 : 0);
  w.put<int64_t>(ck.best_round);
  w.put<double>(ck.best_unseen_mae);
  detail::write_states(w, ck.final_states);
  detail::write_states(w, ck.best_states);
  FV_RUNTIME_CHECK(w.f.good(), "write failed: ", path.string());
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r(path);
  char magic[8];
  FV_RUNTIME_CHECK(r.buf.size() >= sizeof(magic), "checkpoint: truncated reading magic");
  std::memcpy(magic, r.buf.data(), sizeof(magic));
  r.pos = sizeof(magic);
  FV_RUNTIME_CHECK(std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) == 0,
                   "checkpoint: bad magic (not a checkpoint file): ", path.string());
  const uint32_t version = r.take<uint32_t>("version");
  FV_RUNTIME_CHECK(version == detail::kCkptVersion, "checkpoint: unsupported version ", version);

  CheckpointData ck;
  const uint64_t cfg_len = r.take<uint64_t>("config length");
  FV_RUNTIME_CHECK(cfg_len <= (uint64_t(1) << 24), "checkpoint: implausible config length ",
                   cfg_len);
  ck.config_json = r.take_string("config JSON", cfg_len);
  ck.per_plane_models = r.take<uint8_t>("per-plane flag") != 0;
  ck.best_round = r.take<int64_t>("best round");
  ck.best_unseen_mae = r.take<double>("best unseen MAE");
  ck.final_states = detail::read_states(r, "final");
  ck.best_states = detail::read_states(r, "best");
  FV_RUNTIME_CHECK(r.pos == r.buf.size(), "checkpoint: ", r.buf.size() - r.pos,
                   " trailing bytes after states");
  FV_RUNTIME_CHECK(ck.final_states.size() == ck.best_states.size(),
                   "checkpoint: final and best state groups differ in model count");
  const size_t expected = ck.per_plane_models ? 3 : 1;
  FV_RUNTIME_CHECK(ck.final_states.size() == expected, "checkpoint: expected ", expected,
                   " model states, got ", ck.final_states.size());
  return ck;
}

// Writes the string exactly as given; used for configs and reports so reruns
// produce byte-identical files.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  FV_RUNTIME_CHECK(f.is_open(), "cannot open for writing: ", path.string());
  f.write(text.data(), std::streamsize(text.size()));
  FV_RUNTIME_CHECK(f.good(), "write failed: ", path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  FV_RUNTIME_CHECK(f.is_open(), "cannot open: ", path.string());
  std::string s(static_cast<size_t>(f.tellg()), '\0');
  f.seekg(0);
  f.read(s.data(), std::streamsize(s.size()));
  FV_RUNTIME_CHECK(f.good(), "read failed: ", path.string());
  return s;
}

}  // namespace fedvox
