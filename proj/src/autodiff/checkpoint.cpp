#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "meshflow/autodiff.hpp"
#include "meshflow/error.hpp"

namespace meshflow::ad {

namespace {

constexpr std::string_view kMagic = "MFCKPT1";

template <class T>
void put(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError(std::string("checkpoint: truncated while reading ") + what + " at byte " +
                      std::to_string(pos_));
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(std::string_view metadata, std::span<const NamedTensor> tensors) {
  std::string out(kMagic);
  put(out, static_cast<std::uint32_t>(metadata.size()));
  out.append(metadata);
  put(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put(out, static_cast<std::uint64_t>(d));
    for (double v : t.values()) put(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size(), "magic") != kMagic) throw DataError("checkpoint: bad magic");
  Checkpoint ck;
  const auto meta_len = in.get<std::uint32_t>("metadata length");
  ck.metadata = std::string(in.take(meta_len, "metadata"));
  const auto count = in.get<std::uint32_t>("record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto name_len = in.get<std::uint32_t>("name length");
    std::string name(in.take(name_len, "name"));
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > 8) throw DataError("checkpoint: implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>("dims"));
    Buffer values(shape_numel(shape));
    for (auto& v : values) v = in.get<double>("values");
    ck.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes after last record");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, std::string_view metadata,
                     std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(metadata, tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace meshflow::ad
