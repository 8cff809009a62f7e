#ifndef LEBA_WIRE_HPP
#define LEBA_WIRE_HPP

#include <atomic>
#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "leba/oracle.hpp"

namespace leba {

// Binary oracle protocol, little-endian throughout, one request per round
// trip:
//   request:  magic "LEBA1" | shape C,H,W (3 x u32) | C*H*W doubles
//   response: status u8 (0 ok, 1 budget exceeded, 2 malformed) | K u32
//             | K doubles | query counter u64
// Error responses carry K = 0 and the current counter. The connection stays
// open after status 1 and after any malformed frame whose length could still
// be determined; it closes when framing is unrecoverable (bad shape, EOF).

inline constexpr char kWireMagic[5] = {'L', 'E', 'B', 'A', '1'};
inline constexpr std::uint8_t kStatusOk = 0;
inline constexpr std::uint8_t kStatusBudget = 1;
inline constexpr std::uint8_t kStatusMalformed = 2;

std::vector<char> encode_request(const Tensor& x);
// Decodes a request payload (magic + shape + data). Throws ParseError with
// the byte offset on malformed input.
Tensor decode_request(const std::vector<char>& frame);

// Serves one oracle over TCP. Connections are handled on their own threads;
// the shared oracle serializes its counter internally.
class OracleServer {
public:
    OracleServer(Oracle& oracle, const std::string& host, std::uint16_t port);
    ~OracleServer();

    OracleServer(const OracleServer&) = delete;
    OracleServer& operator=(const OracleServer&) = delete;

    std::uint16_t port() const { return port_; }
    // Accept loop; blocks until stop().
    void run();
    void stop();

private:
    void serve_connection(int fd);

    Oracle& oracle_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::mutex threads_mutex_;
    std::vector<std::thread> threads_;
};

// Client side of the protocol. query() is bitwise-equivalent to the served
// oracle's local query; budget exhaustion surfaces as BudgetExceededError.
class RemoteOracle : public Oracle {
public:
    RemoteOracle(const std::string& host, std::uint16_t port, std::uint64_t max_queries);
    ~RemoteOracle() override;

    OracleResponse query(const Tensor& x) override;
    std::uint64_t queries_used() const override { return last_counter_; }
    std::uint64_t max_queries() const override { return max_queries_; }

private:
    int fd_ = -1;
    std::uint64_t last_counter_ = 0;
    std::uint64_t max_queries_ = 0;
};

}  // namespace leba

#endif  // LEBA_WIRE_HPP
