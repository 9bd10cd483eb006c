#pragma once

#include <memory>
#include <string>

#include "tsteer/service.hpp"

namespace tsteer {

/// cpp-httplib front end for SteerService. Adds CORS headers for the configured
/// origin and answers preflight requests.
class HttpServer {
public:
    explicit HttpServer(const SteerService& service);
    ~HttpServer();

    /// Binds; port 0 picks a free port. Returns the bound port or -1.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    bool listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace tsteer
