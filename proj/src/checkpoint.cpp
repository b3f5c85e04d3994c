#include "funnel/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace funnel {

namespace {

using Kind = CheckpointError::Kind;

constexpr char kMagic[4] = {'F', 'T', 'N', 'T'};
constexpr std::uint32_t kMaxNameLength = 1u << 16;
constexpr std::size_t kMaxRank = 4;

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint64_t le(int n, const char* field) {
    need(static_cast<std::size_t>(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string take(std::size_t n, const char* field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* field) const {
    if (!has(n)) throw CheckpointError(Kind::CorruptHeader, std::string("corrupt header: file ends inside ") + field);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void encode_entry(std::string& out, const std::string& name, const Tensor& t) {
  put_le(out, name.size(), 4);
  out += name;
  out.push_back(static_cast<char>(t.dtype()));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) put_le(out, d, 8);
  for (double v : t.data()) {
    if (t.dtype() == DType::f32) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_le(out, bits, 4);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_le(out, bits, 8);
    }
  }
}

}  // namespace

void save_tensors(const NamedTensors& entries, const std::filesystem::path& path) {
  std::map<std::string, const Tensor*> sorted;
  for (const auto& [name, t] : entries) {
    if (name.empty() || name.size() >= kMaxNameLength) {
      throw CheckpointError(Kind::CorruptHeader, "tensor name length out of range", name);
    }
    if (!sorted.emplace(name, &t).second) {
      throw CheckpointError(Kind::DuplicateName, "duplicate tensor name '" + name + "'", name);
    }
  }
  std::string out(kMagic, sizeof kMagic);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, sorted.size(), 4);
  for (const auto& [name, t] : sorted) encode_entry(out, name, *t);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(Kind::Io, "cannot write '" + path.string() + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError(Kind::Io, "write error on '" + path.string() + "'");
}

void save_checkpoint(const ParamMap& params, const std::filesystem::path& path) {
  NamedTensors entries(params.begin(), params.end());
  save_tensors(entries, path);
}

ParamMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::Io, "cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw CheckpointError(Kind::Io, "read error on '" + path.string() + "'");

  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(Kind::BadMagic, "bad magic in '" + path.string() + "'");
  }
  Reader r(bytes);
  r.take(sizeof kMagic, "magic");
  const auto version = r.le(4, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::UnsupportedVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.le(4, "entry count");
  ParamMap params;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = r.le(4, "name length");
    if (name_len == 0 || name_len >= kMaxNameLength) {
      throw CheckpointError(Kind::CorruptHeader, "corrupt header: bad name length in entry " + std::to_string(e));
    }
    const std::string name = r.take(name_len, "tensor name");
    const auto dtype = r.le(1, "dtype");
    if (dtype > 1) throw CheckpointError(Kind::CorruptHeader, "corrupt header: unknown dtype for '" + name + "'", name);
    const auto rank = r.le(1, "rank");
    if (rank == 0 || rank > kMaxRank) {
      throw CheckpointError(Kind::CorruptHeader, "corrupt header: bad rank for '" + name + "'", name);
    }
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      const auto d = r.le(8, "dims");
      if (d == 0 || d > (std::uint64_t{1} << 40) || numel > (std::uint64_t{1} << 40) / d) {
        throw CheckpointError(Kind::CorruptHeader, "corrupt header: bad dims for '" + name + "'", name);
      }
      numel *= d;
      shape.push_back(static_cast<std::size_t>(d));
    }
    const DType dt = static_cast<DType>(dtype);
    const std::size_t width = dt == DType::f32 ? 4 : 8;
    if (r.remaining() / width < numel) {
      throw CheckpointError(Kind::TruncatedPayload, "truncated payload for tensor '" + name + "'", name);
    }
    Tensor t(shape, dt);
    for (std::uint64_t i = 0; i < numel; ++i) {
      const auto bits = r.le(static_cast<int>(width), "payload");
      if (dt == DType::f32) {
        const auto b32 = static_cast<std::uint32_t>(bits);
        float f;
        std::memcpy(&f, &b32, sizeof f);
        t[i] = f;
      } else {
        double v;
        std::memcpy(&v, &bits, sizeof v);
        t[i] = v;
      }
    }
    if (!params.emplace(name, std::move(t)).second) {
      throw CheckpointError(Kind::DuplicateName, "duplicate tensor name '" + name + "'", name);
    }
  }
  if (r.remaining() != 0) {
    throw CheckpointError(Kind::CorruptHeader,
                          "corrupt header: " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return params;
}

void check_shapes(const ParamMap& params, const std::map<std::string, Shape>& expected) {
  for (const auto& [name, shape] : expected) {
    auto it = params.find(name);
    if (it == params.end()) {
      throw CheckpointError(Kind::ShapeMismatch, "shape mismatch: checkpoint lacks tensor '" + name + "'", name);
    }
    if (it->second.shape() != shape) {
      throw CheckpointError(Kind::ShapeMismatch,
                            "shape mismatch for tensor '" + name + "': checkpoint has " +
                                shape_to_string(it->second.shape()) + ", model expects " +
                                shape_to_string(shape),
                            name);
    }
  }
  for (const auto& [name, t] : params) {
    if (!expected.count(name)) {
      throw CheckpointError(Kind::ShapeMismatch, "shape mismatch: model has no tensor '" + name + "'", name);
    }
  }
}

ParamMap load_checkpoint(const std::filesystem::path& path, const std::map<std::string, Shape>& expected) {
  ParamMap params = load_checkpoint(path);
  check_shapes(params, expected);
  return params;
}

void save_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw CheckpointError(Kind::Io, "cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
  if (!f) throw CheckpointError(Kind::Io, "write error on '" + path.string() + "'");
}

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw CheckpointError(Kind::Io, "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace funnel
