#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>

namespace distrifs::net {

// Wall clock in unix seconds; injectable so tests control TTLs and expiry.
using NowFn = std::function<int64_t()>;
NowFn system_now();

// Protocol constants shared by all three roles.
inline constexpr const char* kUserAgent = "DistriFS/1.0";
inline constexpr const char* kApiPrefix = "/api/v1";
inline constexpr const char* kHopsHeader = "X-DistriFS-Hops";
inline constexpr const char* kVisitedHeader = "X-DistriFS-Visited";
inline constexpr const char* kHashHeader = "X-DistriFS-Hash";
inline constexpr const char* kNameHeader = "X-DistriFS-Name";
inline constexpr const char* kConflictsHeader = "X-DistriFS-Conflicts";

struct UrlParts {
    std::string scheme; // "http" or "https"
    std::string host;
    int port = 0;       // defaulted from scheme when absent
    std::string path;   // begins with '/', possibly just "/"

    // scheme://host:port with no trailing slash, for httplib clients.
    std::string origin() const;
};

std::optional<UrlParts> parse_url(std::string_view url);

std::string percent_encode(std::string_view s);

// 32 lowercase hex chars from 128 bits of OS entropy (std::random_device,
// urandom-backed on Linux).
std::string random_hex128();

// Short stable tag for a URL, safe to write to service logs (which must
// never contain addresses or user agents).
std::string url_tag(const std::string& url);

// Serialized line logger for the indexer and server services. Lines pass
// through scrub(), which masks IPv4 literals and the UA product token:
// service logs must never carry client addresses or user agents.
class Logger {
public:
    explicit Logger(std::string role, std::ostream* out = nullptr)
        : role_(std::move(role)), out_(out) {}

    void log(const std::string& line);
    void set_output(std::ostream* out);

    // Replaces anything that looks like an IPv4/IPv6 literal or a
    // User-Agent product token.
    static std::string scrub(const std::string& line);

private:
    std::string role_;
    std::mutex mu_;
    std::ostream* out_;
};

using LoggerPtr = std::shared_ptr<Logger>;

LoggerPtr make_logger(std::string role, std::ostream* out = nullptr);

} // namespace distrifs::net
