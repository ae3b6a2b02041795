#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/decoupled.hpp"

namespace dtr {

enum class CacheDtype : std::uint8_t { f32 = 0, f16 = 1 };

inline std::size_t dtype_bytes(CacheDtype dtype) { return dtype == CacheDtype::f16 ? 2 : 4; }
const char* dtype_name(CacheDtype dtype);
CacheDtype parse_dtype(const std::string& name);

// IEEE-754 binary16, round to nearest even. NaN stays NaN; overflow goes to
// infinity.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

inline constexpr std::uint16_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderBytes = 32;
inline constexpr std::size_t kCacheTableEntryBytes = 16;
inline constexpr std::size_t kCacheEntryHeaderBytes = 12;

struct CacheHeader {
    std::uint16_t version = kCacheVersion;
    CacheDtype dtype = CacheDtype::f16;
    std::uint64_t model_hash = 0;
    std::uint32_t d = 0;
    std::uint32_t c = 0;
    std::uint64_t count = 0;
};

struct CacheEntry {
    std::uint64_t id = 0;
    CompressedRepresentation rep;
};

struct CacheSummary {
    std::uint64_t entries = 0;
    std::uint64_t total_bytes = 0;
    std::uint64_t matrix_bytes = 0;    // token matrices
    std::uint64_t pooled_bytes = 0;    // pooled vectors
    std::uint64_t overhead_bytes = 0;  // header, offset table, entry headers
};

// Bytes one entry occupies on disk.
std::uint64_t cache_entry_bytes(std::uint64_t tokens, std::uint32_t c, CacheDtype dtype);

/// Writes entries in the given order. Throws DataError on duplicate ids or a
/// row width other than c; a failed write leaves no file behind.
CacheSummary write_cache(const std::filesystem::path& path, const CacheHeader& header,
                         std::span<const CacheEntry> entries);

/// Encodes every passage with the input-component (eval mode), compresses
/// it when the model has a pair, and writes the cache.
CacheSummary build_index(const DecoupledModel& model, std::span<const Passage> passages, CacheDtype dtype,
                         const std::filesystem::path& path);

/// Read-only memory-mapped cache. The header, offset table and every entry
/// header are validated on open; corrupt or truncated files raise DataError.
class CacheFile {
public:
    static CacheFile open(const std::filesystem::path& path);

    CacheFile(CacheFile&&) noexcept;
    CacheFile& operator=(CacheFile&&) noexcept;
    ~CacheFile();

    const CacheHeader& header() const noexcept { return header_; }
    std::size_t size() const noexcept { return ids_.size(); }
    std::uint64_t id_at(std::size_t index) const { return ids_.at(index); }
    bool contains(std::uint64_t id) const;

    // Throws NotFoundError for unknown ids.
    CompressedRepresentation read_entry(std::uint64_t id) const;
    std::vector<float> pooled_at(std::size_t index) const;
    // Reads every entry in file order.
    std::vector<CacheEntry> read_all() const;

private:
    CacheFile() = default;
    std::size_t index_of(std::uint64_t id) const;
    CompressedRepresentation decode(std::size_t index, bool with_matrix) const;

    struct Mapping;
    std::unique_ptr<Mapping> map_;
    CacheHeader header_;
    std::vector<std::uint64_t> ids_;
    std::vector<std::uint64_t> offsets_;
    std::vector<std::uint32_t> tokens_;
    std::vector<std::size_t> order_;  // indices sorted by id, for lookup
};

/// Token-matrix bytes n * tokens * dim * bytes, overflow-checked. Throws
/// ConfigError on zero arguments and NumericError on overflow.
std::uint64_t storage_estimate(std::uint64_t n_passages, std::uint64_t avg_tokens, std::uint64_t dim,
                               std::uint64_t bytes_per_value);

// Header, offset table, entry headers and pooled vectors for the same corpus.
std::uint64_t storage_overhead(std::uint64_t n_passages, std::uint64_t dim, std::uint64_t bytes_per_value);

}  // namespace dtr
