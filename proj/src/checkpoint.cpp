#include "peftlab/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <system_error>

namespace peftlab {

namespace {

constexpr std::uint8_t kMagic[4] = {'S', '2', 'L', 'R'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>(u & 0xFFU));
      if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
    }
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <class T>
  T le() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u = static_cast<decltype(u)>(u | (static_cast<decltype(u)>(in_[pos_ + i]) << (8 * i)));
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated data");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::size_t element_count(const std::vector<std::uint32_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1U << 30));
    crc = crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

Tensor ArrayEntry::to_tensor() const {
  Shape shape(dims.begin(), dims.end());
  if (shape.empty()) shape = {1};
  return Tensor(std::move(shape), values);
}

void Checkpoint::add(std::string name, const Tensor& tensor, DType dtype) {
  ArrayEntry e;
  e.name = std::move(name);
  e.dtype = dtype;
  for (std::size_t d : tensor.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.values.assign(tensor.data().begin(), tensor.data().end());
  if (dtype == DType::f32) {
    for (double& v : e.values) v = static_cast<double>(static_cast<float>(v));
  }
  add(std::move(e));
}

void Checkpoint::add(ArrayEntry entry) {
  if (entry.name.empty() || entry.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw CheckpointError("checkpoint: array name must be 1..65535 bytes");
  }
  if (entry.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw CheckpointError("checkpoint: rank of " + entry.name + " exceeds 255");
  }
  if (element_count(entry.dims) != entry.values.size()) {
    throw CheckpointError("checkpoint: dims of " + entry.name + " do not match its value count");
  }
  if (entry.dtype != DType::f32 && entry.dtype != DType::f64) {
    throw CheckpointError("checkpoint: unknown dtype for " + entry.name);
  }
  if (find(entry.name)) throw CheckpointError("checkpoint: duplicate array name " + entry.name);
  entries_.push_back(std::move(entry));
}

const ArrayEntry* Checkpoint::find(std::string_view name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const ArrayEntry& e) { return e.name == name; });
  return it == entries_.end() ? nullptr : &*it;
}

const ArrayEntry& Checkpoint::at(std::string_view name) const {
  const ArrayEntry* e = find(name);
  if (!e) throw CheckpointError("checkpoint: missing array " + std::string(name));
  return *e;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le<std::uint16_t>(kVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  for (const ArrayEntry& e : entries_) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.le<std::uint32_t>(d);
    if (e.dtype == DType::f64) {
      for (double v : e.values) w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
    } else {
      for (double v : e.values) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  const std::uint32_t crc = crc32_of(w.buffer());
  w.le<std::uint32_t>(crc);
  return std::move(w.buffer());
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 2 + 4 + 4) throw CheckpointError("checkpoint: file too short");
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  const auto stored = trailer.le<std::uint32_t>();
  if (crc32_of(body) != stored) throw CheckpointError("checkpoint: CRC mismatch (file is corrupted)");

  Reader r(body);
  const auto magic = r.take(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    throw CheckpointError("checkpoint: bad magic bytes");
  }
  const auto version = r.le<std::uint16_t>();
  if (version != kVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArrayEntry e;
    const auto name_len = r.le<std::uint16_t>();
    const auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    const auto dtype = r.le<std::uint8_t>();
    if (dtype != 1 && dtype != 2) throw CheckpointError("checkpoint: unknown dtype code " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.le<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) e.dims.push_back(r.le<std::uint32_t>());
    const std::size_t n = element_count(e.dims);
    const std::size_t width = e.dtype == DType::f64 ? 8 : 4;
    if (n > r.remaining() / width) throw CheckpointError("checkpoint: truncated data");
    e.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      e.values[j] = e.dtype == DType::f64 ? std::bit_cast<double>(r.le<std::uint64_t>())
                                          : static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>()));
    }
    ck.add(std::move(e));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after the last entry");
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  const fs::path parent = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) {
    throw std::system_error(std::make_error_code(std::errc::no_such_file_or_directory),
                            "output directory does not exist: " + parent.string());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::system_error(std::make_error_code(std::errc::permission_denied), "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw std::system_error(std::make_error_code(std::errc::io_error), "short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace peftlab
