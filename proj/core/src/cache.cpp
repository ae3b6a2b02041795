#include "dtr/cache.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "binary_io.hpp"
#include "dtr/checkpoint.hpp"
#include "dtr/errors.hpp"

namespace dtr {

const char* dtype_name(CacheDtype dtype) { return dtype == CacheDtype::f16 ? "f16" : "f32"; }

CacheDtype parse_dtype(const std::string& name) {
    if (name == "f16") return CacheDtype::f16;
    if (name == "f32") return CacheDtype::f32;
    throw ConfigError("unknown cache dtype '" + name + "' (expected f16 or f32)");
}

std::uint16_t float_to_half(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t exponent = (bits >> 23) & 0xffu;
    std::uint32_t mantissa = bits & 0x7fffffu;
    if (exponent == 0xffu) {
        return static_cast<std::uint16_t>(sign | 0x7c00u | (mantissa ? 0x200u | (mantissa >> 13) : 0u));
    }
    const int e = static_cast<int>(exponent) - 127 + 15;
    if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (e <= 0) {
        if (e < -10) return sign;
        mantissa |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half = mantissa >> shift;
        const std::uint32_t rest = mantissa & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rest > halfway || (rest == halfway && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mantissa >> 13);
    const std::uint32_t rest = mantissa & 0x1fffu;
    // A carry out of the mantissa bumps the exponent, possibly to infinity.
    if (rest > 0x1000u || (rest == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;
    std::uint32_t bits;
    if (exponent == 0x1fu) {
        bits = sign | 0x7f800000u | (mantissa << 13);
    } else if (exponent != 0) {
        bits = sign | ((exponent + 112u) << 23) | (mantissa << 13);
    } else if (mantissa == 0) {
        bits = sign;
    } else {
        // Subnormal half: renormalise.
        int e = -1;
        do {
            ++e;
            mantissa <<= 1;
        } while ((mantissa & 0x400u) == 0);
        bits = sign | ((112u - static_cast<std::uint32_t>(e)) << 23) | ((mantissa & 0x3ffu) << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint64_t cache_entry_bytes(std::uint64_t tokens, std::uint32_t c, CacheDtype dtype) {
    return kCacheEntryHeaderBytes + (tokens + 1) * c * dtype_bytes(dtype);
}

namespace {

constexpr char kMagic[4] = {'D', 'T', 'C', 'X'};

void put_values(detail::ByteWriter& w, std::span<const float> values, CacheDtype dtype) {
    if (dtype == CacheDtype::f32) {
        w.put_bytes(values.data(), values.size() * sizeof(float));
    } else {
        for (float v : values) w.put(float_to_half(v));
    }
}

void check_entry(const CacheEntry& e, std::uint32_t c) {
    const auto& m = e.rep.matrix;
    if (m.rank() != 2 || m.extent(0) != e.rep.token_count || m.extent(1) != c) {
        throw DataError("cache: entry " + std::to_string(e.id) + " has matrix " + shape_string(m.shape()) +
                        ", expected [" + std::to_string(e.rep.token_count) + ", " + std::to_string(c) + "]");
    }
    if (e.rep.pooled.size() != c) throw DataError("cache: entry " + std::to_string(e.id) + " pooled width differs");
}

// Streams the header, offset table and entries to `path` via a temporary.
template <typename Produce>
CacheSummary stream_cache(const std::filesystem::path& path, const CacheHeader& header,
                          std::span<const std::uint64_t> ids, std::span<const std::uint64_t> token_counts,
                          Produce&& produce) {
    std::unordered_set<std::uint64_t> seen;
    for (std::uint64_t id : ids) {
        if (!seen.insert(id).second) throw DataError("cache: duplicate passage id " + std::to_string(id));
    }
    CacheSummary summary;
    summary.entries = ids.size();
    detail::ByteWriter head;
    head.put_bytes(kMagic, 4);
    head.put(header.version);
    head.put(static_cast<std::uint8_t>(header.dtype));
    head.put(std::uint8_t{0});
    head.put(header.model_hash);
    head.put(header.d);
    head.put(header.c);
    head.put(static_cast<std::uint64_t>(ids.size()));
    std::uint64_t offset = kCacheHeaderBytes + kCacheTableEntryBytes * ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        head.put(ids[i]);
        head.put(offset);
        offset += cache_entry_bytes(token_counts[i], header.c, header.dtype);
        summary.matrix_bytes += token_counts[i] * header.c * dtype_bytes(header.dtype);
    }
    summary.total_bytes = offset;
    summary.pooled_bytes = static_cast<std::uint64_t>(ids.size()) * header.c * dtype_bytes(header.dtype);
    summary.overhead_bytes = summary.total_bytes - summary.matrix_bytes - summary.pooled_bytes;

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    try {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cache: cannot write " + tmp.string());
        auto flush = [&](detail::ByteWriter& w) {
            out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
            if (!out) throw DataError("cache: write failed for " + path.string());
        };
        flush(head);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const CacheEntry entry = produce(i);
            check_entry(entry, header.c);
            if (entry.rep.token_count != token_counts[i]) throw DataError("cache: token count changed while writing");
            detail::ByteWriter w;
            w.put(entry.id);
            w.put(static_cast<std::uint32_t>(entry.rep.token_count));
            put_values(w, entry.rep.matrix.values(), header.dtype);
            put_values(w, entry.rep.pooled, header.dtype);
            flush(w);
        }
        out.close();
        if (!out) throw DataError("cache: write failed for " + path.string());
        std::filesystem::rename(tmp, path);
    } catch (...) {
        std::error_code ignored;
        std::filesystem::remove(tmp, ignored);
        throw;
    }
    return summary;
}

}  // namespace

CacheSummary write_cache(const std::filesystem::path& path, const CacheHeader& header,
                         std::span<const CacheEntry> entries) {
    std::vector<std::uint64_t> ids, tokens;
    for (const auto& e : entries) {
        check_entry(e, header.c);
        ids.push_back(e.id);
        tokens.push_back(e.rep.token_count);
    }
    return stream_cache(path, header, ids, tokens, [&](std::size_t i) { return entries[i]; });
}

CacheSummary build_index(const DecoupledModel& model, std::span<const Passage> passages, CacheDtype dtype,
                         const std::filesystem::path& path) {
    CacheHeader header;
    header.dtype = dtype;
    header.model_hash = model_hash(model);
    header.d = model.config.hidden;
    header.c = static_cast<std::uint32_t>(model.cache_dim());
    header.count = passages.size();
    std::vector<std::uint64_t> ids, tokens;
    for (const auto& p : passages) {
        ids.push_back(p.id);
        tokens.push_back(p.tokens.size() + 1);  // trailing [SEP]
    }
    return stream_cache(path, header, ids, tokens, [&](std::size_t i) {
        const Representation rep = encode_input(model, passage_input(passages[i].tokens));
        return CacheEntry{passages[i].id, compress(model, rep)};
    });
}

struct CacheFile::Mapping {
    void* data = nullptr;
    std::size_t size = 0;

    ~Mapping() {
        if (data && size) ::munmap(data, size);
    }
    std::span<const std::uint8_t> bytes() const { return {static_cast<const std::uint8_t*>(data), size}; }
};

CacheFile::CacheFile(CacheFile&&) noexcept = default;
CacheFile& CacheFile::operator=(CacheFile&&) noexcept = default;
CacheFile::~CacheFile() = default;

CacheFile CacheFile::open(const std::filesystem::path& path) {
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw NotFoundError("cache: cannot open " + path.string());
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw DataError("cache: cannot stat " + path.string());
    }
    CacheFile file;
    file.map_ = std::make_unique<Mapping>();
    file.map_->size = static_cast<std::size_t>(st.st_size);
    if (file.map_->size > 0) {
        void* p = ::mmap(nullptr, file.map_->size, PROT_READ, MAP_PRIVATE, fd, 0);
        if (p == MAP_FAILED) {
            ::close(fd);
            throw DataError("cache: cannot map " + path.string());
        }
        file.map_->data = p;
    }
    ::close(fd);

    const std::string what = "cache " + path.string();
    detail::ByteReader r(file.map_->bytes(), what);
    if (r.size() < 4 || std::memcmp(r.take(4), kMagic, 4) != 0) throw DataError(what + ": bad magic (not a cache file)");
    CacheHeader& h = file.header_;
    h.version = r.get<std::uint16_t>();
    if (h.version != kCacheVersion) throw DataError(what + ": unsupported version " + std::to_string(h.version));
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw DataError(what + ": unknown dtype " + std::to_string(dtype));
    h.dtype = static_cast<CacheDtype>(dtype);
    r.get<std::uint8_t>();
    h.model_hash = r.get<std::uint64_t>();
    h.d = r.get<std::uint32_t>();
    h.c = r.get<std::uint32_t>();
    h.count = r.get<std::uint64_t>();
    if (h.c == 0 || h.c > h.d) throw DataError(what + ": inconsistent widths d=" + std::to_string(h.d) +
                                               " c=" + std::to_string(h.c));
    if (h.count > (r.size() - kCacheHeaderBytes) / kCacheTableEntryBytes) {
        throw DataError(what + ": truncated offset table for " + std::to_string(h.count) + " entries");
    }
    file.ids_.resize(h.count);
    file.offsets_.resize(h.count);
    file.tokens_.resize(h.count);
    for (std::uint64_t i = 0; i < h.count; ++i) {
        file.ids_[i] = r.get<std::uint64_t>();
        file.offsets_[i] = r.get<std::uint64_t>();
    }
    std::uint64_t expected = r.position();
    for (std::uint64_t i = 0; i < h.count; ++i) {
        if (file.offsets_[i] != expected) {
            throw DataError(what + ": offset of entry " + std::to_string(i) + " is " +
                            std::to_string(file.offsets_[i]) + ", expected " + std::to_string(expected));
        }
        r.seek(file.offsets_[i]);
        const auto id = r.get<std::uint64_t>();
        if (id != file.ids_[i]) throw DataError(what + ": entry " + std::to_string(i) + " id does not match its table");
        file.tokens_[i] = r.get<std::uint32_t>();
        expected += cache_entry_bytes(file.tokens_[i], h.c, h.dtype);
        if (expected > r.size()) throw DataError(what + ": truncated at entry " + std::to_string(i));
    }
    if (expected != r.size()) throw DataError(what + ": " + std::to_string(r.size() - expected) + " trailing bytes");
    file.order_.resize(h.count);
    for (std::size_t i = 0; i < file.order_.size(); ++i) file.order_[i] = i;
    std::sort(file.order_.begin(), file.order_.end(),
              [&](std::size_t a, std::size_t b) { return file.ids_[a] < file.ids_[b]; });
    for (std::size_t i = 1; i < file.order_.size(); ++i) {
        if (file.ids_[file.order_[i]] == file.ids_[file.order_[i - 1]]) {
            throw DataError(what + ": duplicate id " + std::to_string(file.ids_[file.order_[i]]));
        }
    }
    return file;
}

std::size_t CacheFile::index_of(std::uint64_t id) const {
    auto it = std::lower_bound(order_.begin(), order_.end(), id,
                               [&](std::size_t i, std::uint64_t key) { return ids_[i] < key; });
    if (it == order_.end() || ids_[*it] != id) throw NotFoundError("cache: no entry for passage id " + std::to_string(id));
    return *it;
}

bool CacheFile::contains(std::uint64_t id) const {
    auto it = std::lower_bound(order_.begin(), order_.end(), id,
                               [&](std::size_t i, std::uint64_t key) { return ids_[i] < key; });
    return it != order_.end() && ids_[*it] == id;
}

CompressedRepresentation CacheFile::decode(std::size_t index, bool with_matrix) const {
    const std::size_t c = header_.c;
    const std::size_t tokens = tokens_[index];
    const std::size_t width = dtype_bytes(header_.dtype);
    const std::uint8_t* base = map_->bytes().data() + offsets_[index] + kCacheEntryHeaderBytes;
    auto widen = [&](const std::uint8_t* src, std::size_t n, float* dst) {
        if (header_.dtype == CacheDtype::f32) {
            std::memcpy(dst, src, n * sizeof(float));
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, src + 2 * i, 2);
                dst[i] = half_to_float(h);
            }
        }
    };
    CompressedRepresentation rep;
    rep.token_count = tokens;
    rep.mask.assign(tokens, 1);
    if (with_matrix) {
        rep.matrix = Tensor<float>({tokens, c});
        widen(base, tokens * c, rep.matrix.data());
    }
    rep.pooled.resize(c);
    widen(base + tokens * c * width, c, rep.pooled.data());
    return rep;
}

CompressedRepresentation CacheFile::read_entry(std::uint64_t id) const { return decode(index_of(id), true); }

std::vector<float> CacheFile::pooled_at(std::size_t index) const {
    if (index >= ids_.size()) throw NotFoundError("cache: entry index " + std::to_string(index) + " out of range");
    return decode(index, false).pooled;
}

std::vector<CacheEntry> CacheFile::read_all() const {
    std::vector<CacheEntry> out;
    out.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) out.push_back({ids_[i], decode(i, true)});
    return out;
}

namespace {
std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    std::uint64_t out;
    if (__builtin_mul_overflow(a, b, &out)) throw NumericError("storage estimate overflows 64 bits");
    return out;
}
std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
    std::uint64_t out;
    if (__builtin_add_overflow(a, b, &out)) throw NumericError("storage estimate overflows 64 bits");
    return out;
}
}  // namespace

std::uint64_t storage_estimate(std::uint64_t n, std::uint64_t tokens, std::uint64_t dim, std::uint64_t bytes) {
    if (n == 0 || tokens == 0 || dim == 0 || bytes == 0) throw ConfigError("storage estimate needs positive arguments");
    return checked_mul(checked_mul(checked_mul(n, tokens), dim), bytes);
}

std::uint64_t storage_overhead(std::uint64_t n, std::uint64_t dim, std::uint64_t bytes) {
    const std::uint64_t per_entry = checked_add(kCacheTableEntryBytes + kCacheEntryHeaderBytes, checked_mul(dim, bytes));
    return checked_add(kCacheHeaderBytes, checked_mul(n, per_entry));
}

}  // namespace dtr
