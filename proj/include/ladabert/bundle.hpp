#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/matrix.hpp"

namespace ladabert {

/// Parameter groups of the budget constraint.
enum class Group { embedding, encoder, classifier };

inline std::string_view to_string(Group g) {
  switch (g) {
    case Group::embedding:
      return "embedding";
    case Group::encoder:
      return "encoder";
    case Group::classifier:
      return "classifier";
  }
  return "?";
}

inline std::optional<Group> parse_group(std::string_view s) {
  if (s == "embedding") return Group::embedding;
  if (s == "encoder") return Group::encoder;
  if (s == "classifier") return Group::classifier;
  return std::nullopt;
}

struct BundleEntry {
  std::string name;
  Group group;
  Matrix value;

  friend bool operator==(const BundleEntry&, const BundleEntry&) = default;
};

/// Named parameter matrices in insertion order.
class ParamBundle {
 public:
  /// Appends an entry. Names must be unique and free of whitespace.
  void add(std::string name, Group group, Matrix value) {
    if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
      throw RangeError("ParamBundle: invalid entry name '" + name + "'");
    }
    if (index_.contains(name)) throw RangeError("ParamBundle: duplicate entry '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), group, std::move(value)});
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const BundleEntry* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  const BundleEntry& entry(std::string_view name) const {
    const BundleEntry* e = find(name);
    if (e == nullptr) throw RangeError("ParamBundle: no entry '" + std::string(name) + "'");
    return *e;
  }

  const Matrix& at(std::string_view name) const { return entry(name).value; }
  Matrix& at(std::string_view name) {
    return const_cast<Matrix&>(std::as_const(*this).entry(name).value);
  }

  const std::vector<BundleEntry>& entries() const noexcept { return entries_; }
  std::vector<BundleEntry>& mutable_entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  friend bool operator==(const ParamBundle& a, const ParamBundle& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<BundleEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Number of scalar parameters, optionally restricted to one group.
inline std::size_t param_count(const ParamBundle& bundle, std::optional<Group> group = {}) {
  std::size_t n = 0;
  for (const auto& e : bundle) {
    if (!group || e.group == *group) n += e.value.size();
  }
  return n;
}

/// Shape-only view of a bundle; lets budget code reason about models too large
/// to materialize.
struct LayoutEntry {
  std::string name;
  Group group;
  std::size_t rows;
  std::size_t cols;

  std::size_t size() const noexcept { return rows * cols; }
  /// Row/column vectors (biases, norm scales) are never factorized or pruned.
  bool is_vector() const noexcept { return rows == 1 || cols == 1; }
};

using BundleLayout = std::vector<LayoutEntry>;

inline BundleLayout layout_of(const ParamBundle& bundle) {
  BundleLayout out;
  out.reserve(bundle.size());
  for (const auto& e : bundle) out.push_back({e.name, e.group, e.value.rows(), e.value.cols()});
  return out;
}

inline std::size_t param_count(const BundleLayout& layout, std::optional<Group> group = {}) {
  std::size_t n = 0;
  for (const auto& e : layout) {
    if (!group || e.group == *group) n += e.size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// On-disk format (see docs/formats.md):
//
//   ladabert-bundle 1\n
//   entries <N>\n
//   <name> <group> <rows> <cols> <offset> <fnv1a64 hex>\n     (N lines)
//   blob <bytes>\n
//   <bytes of little-endian IEEE-754 binary64, entries concatenated>
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::string_view kBundleMagic = "ladabert-bundle 1";

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void append_le(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

template <class T>
T parse_number(std::string_view tok, std::string_view what) {
  T value{};
  int base = 10;
  if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (what == "checksum") base = 16;
  }
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value, base);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw MalformedManifestError("bundle manifest: bad " + std::string(what) + " '" +
                                 std::string(tok) + "'");
  }
  return value;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> toks;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) toks.push_back(line.substr(i, j - i));
    i = j;
  }
  return toks;
}

inline std::string_view next_line(std::string_view buf, std::size_t& pos) {
  const std::size_t nl = buf.find('\n', pos);
  if (nl == std::string_view::npos) {
    throw MalformedManifestError("bundle manifest: unexpected end of header");
  }
  std::string_view line = buf.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

}  // namespace detail

inline void write_bundle(std::ostream& os, const ParamBundle& bundle) {
  std::vector<unsigned char> blob;
  blob.reserve(param_count(bundle) * 8);
  std::ostringstream header;
  header << detail::kBundleMagic << '\n' << "entries " << bundle.size() << '\n';
  for (const auto& e : bundle) {
    const std::size_t offset = blob.size();
    for (double v : e.value.data()) detail::append_le(blob, v);
    const auto sum =
        detail::fnv1a64(std::span<const unsigned char>(blob.data() + offset, blob.size() - offset));
    header << e.name << ' ' << to_string(e.group) << ' ' << e.value.rows() << ' '
           << e.value.cols() << ' ' << offset << ' ' << std::hex << std::setw(16)
           << std::setfill('0') << sum << std::dec << std::setfill(' ') << '\n';
  }
  header << "blob " << blob.size() << '\n';
  const std::string h = header.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!os) throw FormatError("bundle: write failed");
}

inline ParamBundle read_bundle(std::istream& is) {
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string_view view(buf);
  std::size_t pos = 0;

  if (detail::next_line(view, pos) != detail::kBundleMagic) {
    throw MalformedManifestError("bundle manifest: missing 'ladabert-bundle 1' header");
  }
  auto count_toks = detail::split_ws(detail::next_line(view, pos));
  if (count_toks.size() != 2 || count_toks[0] != "entries") {
    throw MalformedManifestError("bundle manifest: expected 'entries <N>'");
  }
  const auto n = detail::parse_number<std::size_t>(count_toks[1], "entry count");

  struct Pending {
    std::string name;
    Group group;
    std::size_t rows, cols, offset;
    std::uint64_t checksum;
  };
  std::vector<Pending> pending;
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto t = detail::split_ws(detail::next_line(view, pos));
    if (t.size() != 6) throw MalformedManifestError("bundle manifest: entry line needs 6 fields");
    auto group = parse_group(t[1]);
    if (!group) {
      throw MalformedManifestError("bundle manifest: unknown group '" + std::string(t[1]) + "'");
    }
    Pending p{std::string(t[0]),
              *group,
              detail::parse_number<std::size_t>(t[2], "rows"),
              detail::parse_number<std::size_t>(t[3], "cols"),
              detail::parse_number<std::size_t>(t[4], "offset"),
              detail::parse_number<std::uint64_t>(t[5], "checksum")};
    if (p.rows == 0 || p.cols == 0) {
      throw MalformedManifestError("bundle manifest: zero dimension for '" + p.name + "'");
    }
    if (p.offset != expected_offset) {
      throw MalformedManifestError("bundle manifest: non-contiguous offset for '" + p.name + "'");
    }
    expected_offset += p.rows * p.cols * 8;
    pending.push_back(std::move(p));
  }
  auto blob_toks = detail::split_ws(detail::next_line(view, pos));
  if (blob_toks.size() != 2 || blob_toks[0] != "blob") {
    throw MalformedManifestError("bundle manifest: expected 'blob <bytes>'");
  }
  const auto declared = detail::parse_number<std::size_t>(blob_toks[1], "blob size");
  if (declared < expected_offset) {
    throw TruncatedBlobError("bundle: blob declares " + std::to_string(declared) +
                             " bytes, entries need " + std::to_string(expected_offset));
  }
  if (declared > expected_offset) {
    throw MalformedManifestError("bundle manifest: blob size " + std::to_string(declared) +
                                 " disagrees with entries (" + std::to_string(expected_offset) +
                                 ")");
  }
  const std::size_t available = view.size() - pos;
  if (available < declared) {
    throw TruncatedBlobError("bundle: blob has " + std::to_string(available) +
                             " bytes, manifest needs " + std::to_string(declared));
  }
  if (available > declared) {
    throw MalformedManifestError("bundle: " + std::to_string(available - declared) +
                                 " trailing bytes after blob");
  }

  const auto* blob = reinterpret_cast<const unsigned char*>(view.data() + pos);
  ParamBundle out;
  for (auto& p : pending) {
    const std::size_t count = p.rows * p.cols;
    const unsigned char* start = blob + p.offset;
    if (detail::fnv1a64({start, count * 8}) != p.checksum) {
      throw ChecksumMismatchError("bundle: checksum mismatch for '" + p.name + "'");
    }
    std::vector<double> data(count);
    for (std::size_t k = 0; k < count; ++k) data[k] = detail::read_le(start + 8 * k);
    Matrix m;
    try {
      m = Matrix(p.rows, p.cols, std::move(data));
    } catch (const NumericError&) {
      throw FormatError("bundle: entry '" + p.name + "' holds non-finite values");
    }
    try {
      out.add(std::move(p.name), p.group, std::move(m));
    } catch (const RangeError& e) {
      throw MalformedManifestError(std::string("bundle manifest: ") + e.what());
    }
  }
  return out;
}

inline void save_bundle(const ParamBundle& bundle, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("bundle: cannot open '" + path.string() + "' for writing");
  write_bundle(os, bundle);
}

inline ParamBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("bundle: cannot open '" + path.string() + "'");
  return read_bundle(is);
}

}  // namespace ladabert
