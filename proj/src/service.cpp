#include <charconv>

#include <httplib.h>
#include <json.hpp>

#include "calcquant/readerstudy.hpp"

namespace calcquant::readerstudy {

using nlohmann::json;

namespace {

std::vector<std::string_view> split_path(std::string_view path) {
    std::vector<std::string_view> parts;
    while (!path.empty()) {
        if (path.front() == '/') {
            path.remove_prefix(1);
            continue;
        }
        const auto end = path.find('/');
        parts.push_back(path.substr(0, end));
        path = end == std::string_view::npos ? std::string_view{} : path.substr(end);
    }
    return parts;
}

HttpResponse json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

HttpResponse error_response(int status, const std::string& code, const std::string& message) {
    return json_response(status, {{"error", code}, {"message", message}});
}

int status_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::state: return 409;
    case ErrorCode::invalid_argument:
    case ErrorCode::format: return 400;
    default: return 500;
    }
}

const char* code_name(ErrorCode code) {
    switch (code) {
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::state: return "conflict";
    case ErrorCode::invalid_argument:
    case ErrorCode::format: return "bad_request";
    default: return "internal";
    }
}

int parse_offset(std::string_view s) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && ptr == s.data() + s.size(), ErrorCode::invalid_argument, "bad slice offset");
    return v;
}

json progress(const Session& s) {
    const std::size_t graded = s.graded_count(), n = s.regions().size();
    return {{"regions", n}, {"graded", graded}, {"remaining", n - graded}, {"complete", graded == n}};
}

std::string frame_url(const std::string& id, int offset, Variant v) {
    return "/regions/" + id + "/frames/" + std::to_string(offset) + "/" + to_string(v) + ".png";
}

} // namespace

HttpResponse Service::handle(std::string_view method, std::string_view path,
                             const std::map<std::string, std::string>& query, std::string_view body, bool local) {
    try {
        const auto parts = split_path(path);
        const bool get = method == "GET", post = method == "POST";
        if (get && parts.size() == 1 && parts[0] == "session") {
            json j = progress(session_);
            j["neighborhood"] = kNeighborhood;
            j["window_mm"] = kWindowMm;
            j["window_level"] = kWindowLevel;
            j["window_width"] = kWindowWidth;
            j["grades"] = {"blue_substantially_better", "blue_slightly_better", "equal", "red_slightly_better",
                           "red_substantially_better"};
            return json_response(200, j);
        }
        if (get && parts.size() == 1 && parts[0] == "regions") {
            const auto grades = session_.grades();
            json list = json::array();
            for (const auto& r : session_.regions())
                list.push_back({{"id", r.id}, {"graded", grades.count(r.id) == 1}});
            return json_response(200, {{"regions", list}});
        }
        if (get && parts.size() == 2 && parts[0] == "regions" && parts[1] == "next") {
            const auto next = session_.next_ungraded();
            json j = progress(session_);
            j["region_id"] = next ? json(*next) : json(nullptr);
            return json_response(200, j);
        }
        if (get && parts.size() == 3 && parts[0] == "regions" && parts[2] == "frames") {
            const std::string id(parts[1]);
            const Region& r = session_.region(id);
            const auto [left, right] = session_.panel_colors(id);
            json frames = json::array();
            for (int o = -kNeighborhood; o <= kNeighborhood; ++o) {
                json f{{"offset", o}};
                for (Variant v : {Variant::plain, Variant::overlay, Variant::left, Variant::right})
                    f[to_string(v)] = frame_url(id, o, v);
                frames.push_back(std::move(f));
            }
            const auto grades = session_.grades();
            return json_response(200, {{"region_id", id},
                                       {"graded", grades.count(id) == 1},
                                       {"target_offset", 0},
                                       {"width", r.window_size[0] * kContourScale},
                                       {"height", r.window_size[1] * kContourScale},
                                       {"panels", {{"left", left}, {"right", right}}},
                                       {"frames", frames}});
        }
        if (get && parts.size() == 5 && parts[0] == "regions" && parts[2] == "frames" && parts[4].size() > 4 &&
            parts[4].substr(parts[4].size() - 4) == ".png") {
            const int offset = parse_offset(parts[3]);
            const Variant v = parse_variant(parts[4].substr(0, parts[4].size() - 4));
            const std::string id(parts[1]);
            (void)session_.region(id);
            try {
                return {200, "image/png", session_.frame_png(id, offset, v)};
            } catch (const Error& e) {
                // Crop file names would reveal which mask is which.
                if (e.code() == ErrorCode::io || e.code() == ErrorCode::format)
                    return error_response(500, "internal", "frame unavailable");
                throw;
            }
        }
        if (post && parts.size() == 3 && parts[0] == "regions" && parts[2] == "grade") {
            json j;
            try {
                j = json::parse(body);
                require(j.is_object(), ErrorCode::invalid_argument, "grade body must be a JSON object");
                GradeRecord rec;
                rec.region_id = std::string(parts[1]);
                if (j.contains("grade") && !j["grade"].is_null())
                    rec.grade = parse_blind_grade(j["grade"].get<std::string>());
                rec.gradable = j.value("gradable", true);
                rec.at_least_one_accurate = j.value("at_least_one_accurate", true);
                const bool overwrite = j.value("overwrite", false);
                const bool replaced = session_.submit_grade(std::move(rec), overwrite);
                json ack = progress(session_);
                ack["region_id"] = std::string(parts[1]);
                ack["accepted"] = true;
                ack["replaced"] = replaced;
                return json_response(200, ack);
            } catch (const json::exception& e) {
                return error_response(400, "bad_request", std::string("invalid grade body: ") + e.what());
            }
        }
        if (get && parts.size() == 1 && parts[0] == "summary") {
            const auto it = query.find("unblind");
            if (it != query.end() && (it->second == "true" || it->second == "1")) {
                if (!local) return error_response(403, "forbidden", "unblinding is only available locally");
                if (!session_.has_key()) return error_response(409, "conflict", "blinding key file is missing");
                return {200, "application/json", summary_json(session_.summarize())};
            }
            // Blinded tally in the reader's own terms.
            std::array<std::size_t, 5> counts{};
            std::size_t ungradable = 0;
            for (const auto& [id, g] : session_.grades()) {
                if (!g.gradable || !g.grade) {
                    ++ungradable;
                    continue;
                }
                ++counts[static_cast<std::size_t>(*g.grade)];
            }
            json c = json::object();
            for (BlindGrade g : {BlindGrade::blue_substantially_better, BlindGrade::blue_slightly_better,
                                 BlindGrade::equal, BlindGrade::red_slightly_better,
                                 BlindGrade::red_substantially_better})
                c[to_string(g)] = counts[static_cast<std::size_t>(g)];
            json j = progress(session_);
            j["counts"] = c;
            j["ungradable"] = ungradable;
            return json_response(200, j);
        }
        return error_response(404, "not_found", "no route for " + std::string(method) + " " + std::string(path));
    } catch (const Error& e) {
        return error_response(status_for(e.code()), code_name(e.code()), e.what());
    }
}

struct HttpServer::Impl {
    explicit Impl(Session& s) : service(s) {}
    Service service;
    httplib::Server server;
};

HttpServer::HttpServer(Session& session) : impl_(std::make_unique<Impl>(session)) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query.emplace(k, v);
        const bool local = req.remote_addr == "127.0.0.1" || req.remote_addr == "::1";
        const HttpResponse r = impl_->service.handle(req.method, req.path, query, req.body, local);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
        res.set_header("Cache-Control", "no-store");
    };
    impl_->server.Get("/session", handler);
    impl_->server.Get("/summary", handler);
    impl_->server.Get(R"(/regions(/.*)?)", handler);
    impl_->server.Post(R"(/regions/.*)", handler);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    require(bound > 0, ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::mount(const std::filesystem::path& dir) {
    require(impl_->server.set_mount_point("/", dir.string()), ErrorCode::not_found,
            "static directory not found: " + dir.string());
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

} // namespace calcquant::readerstudy
