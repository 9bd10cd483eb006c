#include "http_server.hpp"

#include <httplib.h>

namespace tsteer {

struct HttpServer::Impl {
    explicit Impl(const SteerService& s) : service(s) {}
    const SteerService& service;
    httplib::Server server;
};

HttpServer::HttpServer(const SteerService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    const std::string origin = service.options().cors_origin;
    auto forward = [this, origin](const httplib::Request& req, httplib::Response& res) {
        const HttpResponse r = impl_->service.handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
        if (!origin.empty()) res.set_header("Access-Control-Allow-Origin", origin);
    };
    srv.Get(R"(/api/.*)", forward);
    srv.Post(R"(/api/.*)", forward);
    srv.Options(R"(/api/.*)", [origin](const httplib::Request&, httplib::Response& res) {
        if (!origin.empty()) res.set_header("Access-Control-Allow-Origin", origin);
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) return impl_->server.bind_to_any_port(host);
    return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace tsteer
