#include "leba/wire.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>

namespace leba {

namespace {

constexpr std::size_t kMaxElements = 1u << 24;

void put_u32le(std::vector<char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// Reads exactly n bytes. On failure, clean_eof tells whether the stream ended
// on a frame boundary (no bytes consumed) or mid-frame.
bool read_exact(int fd, char* dst, std::size_t n, bool& clean_eof) {
    std::size_t got = 0;
    clean_eof = false;
    while (got < n) {
        ssize_t r = ::read(fd, dst + got, n - got);
        if (r == 0) {
            clean_eof = got == 0;
            return false;
        }
        if (r < 0) {
            if (errno == EINTR) continue;
            clean_eof = got == 0;
            return false;
        }
        got += static_cast<std::size_t>(r);
    }
    return true;
}

bool write_exact(int fd, const char* src, std::size_t n) {
    std::size_t sent = 0;
    while (sent < n) {
        ssize_t r = ::write(fd, src + sent, n - sent);
        if (r <= 0) {
            if (r < 0 && errno == EINTR) continue;
            return false;
        }
        sent += static_cast<std::size_t>(r);
    }
    return true;
}

std::vector<char> encode_response(std::uint8_t status, const Tensor* probs, std::uint64_t counter) {
    std::vector<char> buf;
    buf.push_back(static_cast<char>(status));
    const std::uint32_t k = probs ? static_cast<std::uint32_t>(probs->numel()) : 0;
    put_u32le(buf, k);
    if (probs) {
        const char* p = reinterpret_cast<const char*>(probs->data.data());
        buf.insert(buf.end(), p, p + probs->numel() * sizeof(double));
    }
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((counter >> (8 * i)) & 0xff));
    return buf;
}

}  // namespace

std::vector<char> encode_request(const Tensor& x) {
    if (x.shape.size() != 3) throw ContractError("encode_request: tensor must be {C,H,W}");
    std::vector<char> buf(kWireMagic, kWireMagic + 5);
    for (std::size_t d : x.shape) put_u32le(buf, static_cast<std::uint32_t>(d));
    const char* p = reinterpret_cast<const char*>(x.data.data());
    buf.insert(buf.end(), p, p + x.numel() * sizeof(double));
    return buf;
}

Tensor decode_request(const std::vector<char>& frame) {
    if (frame.size() < 5) throw ParseError("wire request: truncated magic", frame.size());
    for (std::size_t i = 0; i < 5; ++i)
        if (frame[i] != kWireMagic[i]) throw ParseError("wire request: bad magic byte", i);
    if (frame.size() < 17) throw ParseError("wire request: truncated shape", frame.size());
    const auto* u = reinterpret_cast<const unsigned char*>(frame.data());
    std::size_t dims[3];
    std::size_t n = 1;
    for (int i = 0; i < 3; ++i) {
        dims[i] = get_u32le(u + 5 + 4 * i);
        n *= dims[i];
    }
    if (n == 0 || n > kMaxElements) throw ParseError("wire request: implausible shape", 5);
    if (frame.size() != 17 + n * sizeof(double))
        throw ParseError("wire request: payload length mismatch", 17);
    Tensor x({dims[0], dims[1], dims[2]});
    std::memcpy(x.data.data(), frame.data() + 17, n * sizeof(double));
    return x;
}

OracleServer::OracleServer(Oracle& oracle, const std::string& host, std::uint16_t port)
    : oracle_(oracle) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw ContractError("OracleServer: socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        throw ContractError("OracleServer: bad host " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
        ::listen(listen_fd_, 16) < 0) {
        ::close(listen_fd_);
        throw ContractError("OracleServer: cannot bind " + host + ":" + std::to_string(port));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

OracleServer::~OracleServer() {
    stop();
    std::lock_guard<std::mutex> lock(threads_mutex_);
    for (auto& t : threads_)
        if (t.joinable()) t.join();
}

void OracleServer::stop() {
    bool expected = false;
    if (stopping_.compare_exchange_strong(expected, true)) {
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
}

void OracleServer::run() {
    while (!stopping_.load()) {
        int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (stopping_.load()) break;
            if (errno == EINTR) continue;
            break;
        }
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        std::lock_guard<std::mutex> lock(threads_mutex_);
        threads_.emplace_back([this, fd] { serve_connection(fd); });
    }
}

void OracleServer::serve_connection(int fd) {
    std::vector<char> payload;
    for (;;) {
        char magic[5];
        bool clean = false;
        if (!read_exact(fd, magic, 5, clean)) {
            // Mid-frame EOF still gets a malformed response attempt.
            if (!clean) {
                auto resp = encode_response(kStatusMalformed, nullptr, oracle_.queries_used());
                write_exact(fd, resp.data(), resp.size());
            }
            break;
        }
        if (std::memcmp(magic, kWireMagic, 5) != 0) {
            // Framing is lost at an unknown position; report and resync from
            // whatever the client sends next.
            auto resp = encode_response(kStatusMalformed, nullptr, oracle_.queries_used());
            if (!write_exact(fd, resp.data(), resp.size())) break;
            continue;
        }
        char shape_bytes[12];
        if (!read_exact(fd, shape_bytes, 12, clean)) {
            auto resp = encode_response(kStatusMalformed, nullptr, oracle_.queries_used());
            write_exact(fd, resp.data(), resp.size());
            break;
        }
        const auto* u = reinterpret_cast<const unsigned char*>(shape_bytes);
        std::size_t dims[3];
        std::size_t n = 1;
        for (int i = 0; i < 3; ++i) {
            dims[i] = get_u32le(u + 4 * i);
            n *= dims[i];
        }
        if (n == 0 || n > kMaxElements) {
            // Cannot know the payload length; close after reporting.
            auto resp = encode_response(kStatusMalformed, nullptr, oracle_.queries_used());
            write_exact(fd, resp.data(), resp.size());
            break;
        }
        payload.resize(n * sizeof(double));
        if (!read_exact(fd, payload.data(), payload.size(), clean)) {
            auto resp = encode_response(kStatusMalformed, nullptr, oracle_.queries_used());
            write_exact(fd, resp.data(), resp.size());
            break;
        }
        Tensor x({dims[0], dims[1], dims[2]});
        std::memcpy(x.data.data(), payload.data(), payload.size());
        std::uint8_t status = kStatusOk;
        OracleResponse r;
        if (!x.all_finite()) {
            status = kStatusMalformed;
        } else {
            try {
                r = oracle_.query(x);
            } catch (const BudgetExceededError&) {
                status = kStatusBudget;
            } catch (const std::exception&) {
                status = kStatusMalformed;
            }
        }
        std::vector<char> resp =
            status == kStatusOk ? encode_response(kStatusOk, &r.probs, r.query_index)
                                : encode_response(status, nullptr, oracle_.queries_used());
        if (!write_exact(fd, resp.data(), resp.size())) break;
    }
    ::close(fd);
}

RemoteOracle::RemoteOracle(const std::string& host, std::uint16_t port, std::uint64_t max_queries)
    : max_queries_(max_queries) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ProtocolError("RemoteOracle: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        throw ProtocolError("RemoteOracle: bad host " + host);
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
        ::close(fd_);
        throw ProtocolError("RemoteOracle: cannot connect to " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

RemoteOracle::~RemoteOracle() {
    if (fd_ >= 0) ::close(fd_);
}

OracleResponse RemoteOracle::query(const Tensor& x) {
    std::vector<char> req = encode_request(x);
    if (!write_exact(fd_, req.data(), req.size())) throw ProtocolError("RemoteOracle: send failed");
    char head[5];
    bool clean = false;
    if (!read_exact(fd_, head, 5, clean)) throw ProtocolError("RemoteOracle: short response header");
    const std::uint8_t status = static_cast<std::uint8_t>(head[0]);
    const std::uint32_t k = get_u32le(reinterpret_cast<const unsigned char*>(head + 1));
    if (k > kMaxElements) throw ProtocolError("RemoteOracle: implausible class count");
    std::vector<char> body(k * sizeof(double) + 8);
    if (!read_exact(fd_, body.data(), body.size(), clean))
        throw ProtocolError("RemoteOracle: short response body");
    std::uint64_t counter = 0;
    std::memcpy(&counter, body.data() + k * sizeof(double), 8);
    last_counter_ = counter;
    if (status == kStatusBudget) throw BudgetExceededError("RemoteOracle: budget exceeded");
    if (status == kStatusMalformed) throw ProtocolError("RemoteOracle: server reports malformed frame");
    if (status != kStatusOk) throw ProtocolError("RemoteOracle: unknown status byte");
    Tensor probs({k});
    std::memcpy(probs.data.data(), body.data(), k * sizeof(double));
    return OracleResponse{std::move(probs), counter};
}

}  // namespace leba
