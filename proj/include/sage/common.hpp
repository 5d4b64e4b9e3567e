#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sage {

// All engine errors are thrown as sage::Error; message strings are meant to
// be actionable (they name the offending rpc/service/file).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail(const char* fmt, Args... args) {
    char buf[1024];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    throw Error(buf);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

template <typename... Args>
inline void warn(const char* fmt, Args... args) {
    std::fprintf(stderr, "[sage] warning: ");
    if constexpr (sizeof...(args) == 0)
        std::fputs(fmt, stderr);
    else
        std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

// FNV-1a, used for config/graph/parameter fingerprints embedded in outputs.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

constexpr const char* kSpanFormatHeader = "sage-spans";
constexpr const char* kMetricFormatHeader = "sage-metrics";
constexpr const char* kGroundTruthFormatHeader = "sage-ground-truth";
constexpr int kFormatVersion = 1;

}  // namespace sage
