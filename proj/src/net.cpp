#include "distrifs/net.hpp"

#include <cctype>
#include <chrono>
#include <random>

#include "distrifs/sha256.hpp"

namespace distrifs::net {

NowFn system_now() {
    return [] {
        return std::chrono::duration_cast<std::chrono::seconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    };
}

std::string UrlParts::origin() const {
    return scheme + "://" + host + ":" + std::to_string(port);
}

std::optional<UrlParts> parse_url(std::string_view url) {
    UrlParts p;
    std::string_view rest;
    if (url.starts_with("http://")) {
        p.scheme = "http";
        p.port = 80;
        rest = url.substr(7);
    } else if (url.starts_with("https://")) {
        p.scheme = "https";
        p.port = 443;
        rest = url.substr(8);
    } else {
        return std::nullopt;
    }

    auto slash = rest.find_first_of("/?#");
    std::string_view authority = rest.substr(0, slash);
    if (authority.empty()) return std::nullopt;

    auto colon = authority.rfind(':');
    if (colon != std::string_view::npos && authority.find(']') == std::string_view::npos) {
        auto port_sv = authority.substr(colon + 1);
        if (port_sv.empty()) return std::nullopt;
        int port = 0;
        for (char c : port_sv) {
            if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
            port = port * 10 + (c - '0');
            if (port > 65535) return std::nullopt;
        }
        p.port = port;
        authority = authority.substr(0, colon);
    }
    if (authority.empty() || authority.find(' ') != std::string_view::npos) {
        return std::nullopt;
    }
    p.host = std::string(authority);
    p.path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
    if (p.path.empty() || p.path[0] != '/') p.path = "/" + p.path;
    return p;
}

std::string percent_encode(std::string_view s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    out.reserve(s.size());
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(char(c));
        } else {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0xf]);
        }
    }
    return out;
}

std::string random_hex128() {
    static const char* digits = "0123456789abcdef";
    std::random_device rd;
    std::string out;
    out.reserve(32);
    for (int i = 0; i < 4; ++i) {
        uint32_t word = rd();
        for (int j = 0; j < 8; ++j) {
            out.push_back(digits[(word >> (j * 4)) & 0xf]);
        }
    }
    return out;
}

std::string url_tag(const std::string& url) {
    return "#" + Sha256::hex_digest(url).substr(0, 8);
}

void Logger::log(const std::string& line) {
    std::lock_guard lock(mu_);
    if (!out_) return;
    *out_ << "[" << role_ << "] " << scrub(line) << "\n";
    out_->flush();
}

void Logger::set_output(std::ostream* out) {
    std::lock_guard lock(mu_);
    out_ = out;
}

std::string Logger::scrub(const std::string& line) {
    std::string out;
    out.reserve(line.size());
    size_t i = 0;
    while (i < line.size()) {
        // dotted-quad detector; anything matching gets masked
        if (std::isdigit(static_cast<unsigned char>(line[i]))) {
            size_t j = i;
            int dots = 0;
            while (j < line.size() &&
                   (std::isdigit(static_cast<unsigned char>(line[j])) || line[j] == '.')) {
                if (line[j] == '.') ++dots;
                ++j;
            }
            if (dots == 3) {
                out += "<addr>";
                i = j;
                continue;
            }
        }
        out.push_back(line[i]);
        ++i;
    }
    // mask the UA product token wherever it appears
    const std::string ua = kUserAgent;
    for (size_t pos = out.find(ua); pos != std::string::npos; pos = out.find(ua, pos)) {
        out.replace(pos, ua.size(), "<ua>");
    }
    return out;
}

LoggerPtr make_logger(std::string role, std::ostream* out) {
    return std::make_shared<Logger>(std::move(role), out);
}

} // namespace distrifs::net
