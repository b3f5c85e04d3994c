#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "funnel/model.hpp"

namespace funnel {

// FTNT archive, all integers little-endian:
//   "FTNT" | u32 version | u32 count |
//   count x (u32 name_len | name | u8 dtype (0 f32, 1 f64) | u8 rank |
//            rank x u64 dim | payload)
// Entries are written sorted by name, so equal inputs give identical files.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind {
    Io,
    BadMagic,
    UnsupportedVersion,
    CorruptHeader,
    TruncatedPayload,
    DuplicateName,
    ShapeMismatch,  // includes tensors missing from or unknown to the model
  };

  CheckpointError(Kind kind, const std::string& what, std::string tensor = {})
      : std::runtime_error(what), kind_(kind), tensor_(std::move(tensor)) {}

  Kind kind() const { return kind_; }
  /// Offending tensor name, when one applies.
  const std::string& tensor() const { return tensor_; }

 private:
  Kind kind_;
  std::string tensor_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Rejects duplicate names before anything is written.
void save_tensors(const NamedTensors& entries, const std::filesystem::path& path);
void save_checkpoint(const ParamMap& params, const std::filesystem::path& path);

/// Parses and validates the archive structure (no shape expectations).
ParamMap load_checkpoint(const std::filesystem::path& path);

/// Loads and checks that the names and shapes match `expected` exactly.
ParamMap load_checkpoint(const std::filesystem::path& path,
                         const std::map<std::string, Shape>& expected);

/// Shape check of already-loaded tensors, with the same errors as above.
void check_shapes(const ParamMap& params, const std::map<std::string, Shape>& expected);

void save_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json load_json(const std::filesystem::path& path);

}  // namespace funnel
