#pragma once

#include "fltlm/tensor.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fltlm {

inline constexpr std::string_view kCheckpointMagic = "FLTLM-CHECKPOINT v1";

struct NamedArray {
  std::string name;
  Matrix value;
};

/// Textual header (magic, metadata line, one `array <name> <rows> <cols>
/// <offset>` line per array, `end`) followed by a little-endian float32
/// payload. Offsets are bytes from the start of the payload.
struct Checkpoint {
  std::string metadata;  // single-line JSON, may be empty
  std::vector<NamedArray> arrays;

  const Matrix& get(std::string_view name) const;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace fltlm
