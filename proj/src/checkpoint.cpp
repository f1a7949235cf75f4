#include "fltlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fltlm {

const Matrix& Checkpoint::get(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw CheckpointError("checkpoint has no array named '" + std::string(name) + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream header;
  header << kCheckpointMagic << '\n';
  if (ckpt.metadata.find('\n') != std::string::npos) throw CheckpointError("metadata must be a single line");
  header << "meta " << ckpt.metadata << '\n';
  size_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (a.name.empty() || a.name.find_first_of(" \n") != std::string::npos) {
      throw CheckpointError("invalid array name '" + a.name + "'");
    }
    header << "array " << a.name << ' ' << a.value.rows() << ' ' << a.value.cols() << ' ' << offset << '\n';
    offset += static_cast<size_t>(a.value.size()) * 4;
  }
  header << "end\n";
  std::string out = header.str();
  out.reserve(out.size() + offset);
  for (const auto& a : ckpt.arrays) {
    for (Index i = 0; i < a.value.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(a.value.data()[i]);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
    }
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw CheckpointError("truncated checkpoint header");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };
  if (next_line() != kCheckpointMagic) throw CheckpointError("bad checkpoint magic");
  Checkpoint ckpt;
  struct Entry {
    std::string name;
    Index rows, cols;
    size_t offset;
  };
  std::vector<Entry> entries;
  for (;;) {
    std::string line = next_line();
    if (line == "end") break;
    if (line.rfind("meta ", 0) == 0) {
      ckpt.metadata = line.substr(5);
      continue;
    }
    std::istringstream is(line);
    std::string tag;
    Entry e;
    if (!(is >> tag >> e.name >> e.rows >> e.cols >> e.offset) || tag != "array" || e.rows < 0 || e.cols < 0) {
      throw CheckpointError("malformed header line: " + line);
    }
    entries.push_back(std::move(e));
  }
  const std::string_view payload = bytes.substr(pos);
  for (const auto& e : entries) {
    const size_t n = static_cast<size_t>(e.rows * e.cols);
    if (e.offset + n * 4 > payload.size()) throw CheckpointError("array '" + e.name + "' exceeds payload");
    Matrix m(e.rows, e.cols);
    for (size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[e.offset + 4 * i + b])) << (8 * b);
      }
      m.data()[i] = std::bit_cast<float>(bits);
    }
    ckpt.arrays.push_back({e.name, std::move(m)});
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace fltlm
