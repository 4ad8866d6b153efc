#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gist {

using json = nlohmann::json;

/// Lowercase hex SHA-256 of the given bytes.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 over the canonical (sorted-key, compact) JSON serialization.
std::string canonical_hash(const json& value);

// splitmix64 finalizer; used to derive independent substream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Seed for substream `index` of a stream seeded with `seed`. The result does
/// not depend on how many other substreams exist.
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) noexcept;

/// First 8 bytes of a hex digest as an integer seed.
std::uint64_t seed_from_hex(std::string_view hex);

/// Counter-based standard normal draws (Box-Muller over splitmix64). Portable
/// across standard libraries, unlike std::normal_distribution.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : state_(seed) {}
  double next();
  double next_uniform();  // in (0, 1)

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
void append_line(const std::filesystem::path& path, std::string_view line);

/// Reads a JSON Lines file. Blank lines are skipped; a parse error throws
/// Error(parse) naming the 1-based line number.
std::vector<json> read_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<json>& rows);

/// Process-wide warning sink; defaults to stderr.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

/// ISO-8601 UTC timestamp with second resolution.
std::string utc_timestamp();

/// Runs body(i) for i in [0, count) on up to `threads` workers. Exceptions are
/// rethrown on the caller (the one from the lowest index wins).
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& body);

std::string trim(std::string_view s);
std::vector<std::string> split_words(std::string_view s);

}  // namespace gist
