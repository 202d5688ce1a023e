// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "editing.hpp"
#include "hashing.hpp"
#include "pipeline.hpp"

namespace sketchguide {

enum class JobKind { generate, edit, analyze, invert };
enum class JobState { queued, running, done, failed };

inline std::string to_string(JobKind k) {
    switch (k) {
    case JobKind::generate: return "generate";
    case JobKind::edit: return "edit";
    case JobKind::analyze: return "analyze";
    case JobKind::invert: return "invert";
    }
    return "?";
}

inline std::string to_string(JobState s) {
    switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
    }
    return "?";
}

struct JobRequest {
    JobKind kind = JobKind::generate;
    Image sketch;
    std::optional<Image> exemplar;
    std::string class_label;
    std::uint64_t seed = 0;
    std::optional<double> beta;
    std::optional<int> guided_steps;
    std::map<std::string, std::string> input_refs;
};

struct JobRecord {
    std::string id;
    JobKind kind = JobKind::generate;
    JobState state = JobState::queued;
    int completed_steps = 0;
    int total_steps = 0;
    std::map<std::string, std::string> input_refs;
    std::map<std::string, std::string> output_refs;
    std::string error;
    std::vector<std::uint8_t> result_png;
    std::string trace_jsonl;
    int last_traced_step = 0;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"id", id},
                {"kind", to_string(kind)},
                {"state", to_string(state)},
                {"progress",
                 {{"completed", completed_steps}, {"total", total_steps}, {"trace_step", last_traced_step}}},
                {"input_refs", input_refs},
                {"output_refs", output_refs},
                {"error", error}};
    }
};

class queue_full_error : public error {
public:
    using error::error;
};

// FIFO job runner over one backbone instance. Submission and status reads are
// safe from any thread; jobs execute one at a time on the worker thread.
template <Denoiser B>
class JobService {
public:
    JobService(B backbone, PipelineConfig config, std::size_t queue_cap = 16)
        : backbone_(std::move(backbone)), config_(std::move(config)), cap_(queue_cap) {
        worker_ = std::thread([this] { run(); });
    }

    JobService(const JobService&) = delete;
    JobService& operator=(const JobService&) = delete;

    ~JobService() {
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }

    std::string submit(JobRequest req) {
        if (req.kind != JobKind::generate && req.kind != JobKind::edit) {
            throw parameter_error("service runs generate and edit jobs only");
        }
        std::lock_guard lock(mu_);
        if (pending_.size() >= cap_) throw queue_full_error("job queue is full");
        char buf[32];
        std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(++next_id_));
        JobRecord rec;
        rec.id = buf;
        rec.kind = req.kind;
        rec.total_steps = config_.schedule.num_inference_steps;
        rec.input_refs = req.input_refs;
        records_.emplace(rec.id, rec);
        pending_.push_back({rec.id, std::move(req)});
        cv_.notify_one();
        return rec.id;
    }

    [[nodiscard]] std::optional<JobRecord> get(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = records_.find(id);
        if (it == records_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] const PipelineConfig& config() const { return config_; }

    // While held, queued jobs stay queued; submissions are still accepted.
    void hold() {
        std::lock_guard lock(mu_);
        held_ = true;
    }
    void release() {
        {
            std::lock_guard lock(mu_);
            held_ = false;
        }
        cv_.notify_all();
    }

    [[nodiscard]] std::size_t queued() const {
        std::lock_guard lock(mu_);
        return pending_.size();
    }

private:
    struct Pending {
        std::string id;
        JobRequest request;
    };

    void run() {
        for (;;) {
            Pending job;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [this] { return stopping_ || (!held_ && !pending_.empty()); });
                if (stopping_) return;
                job = std::move(pending_.front());
                pending_.pop_front();
                records_.at(job.id).state = JobState::running;
            }
            execute(job);
        }
    }

    void execute(Pending& job) {
        PipelineConfig cfg = config_;
        const JobRequest& req = job.request;
        if (req.beta) cfg.guidance.beta = *req.beta;
        if (req.guided_steps) cfg.guidance.guided_steps = *req.guided_steps;

        std::vector<GuidanceTraceRow> step_rows;
        GenerationHooks hooks;
        hooks.on_trace = [&](const GuidanceTraceRow& r) { step_rows.push_back(r); };
        // Trace rows of a step and its progress tick land under one lock.
        hooks.on_progress = [&](int done, int total) {
            std::lock_guard lock(mu_);
            auto& rec = records_.at(job.id);
            for (const auto& r : step_rows) {
                rec.trace_jsonl += to_json(r).dump() + "\n";
                rec.last_traced_step = r.step;
            }
            step_rows.clear();
            rec.completed_steps = done;
            rec.total_steps = total;
        };
        try {
            const ReferenceFeatures features =
                extract_reference_features(req.sketch, req.class_label, cfg, backbone_);
            GenerationResult result;
            if (req.kind == JobKind::edit) {
                if (!req.exemplar) throw parameter_error("edit job needs an exemplar image");
                const ExemplarFeatures ex = record_exemplar(*req.exemplar, req.class_label, cfg, backbone_);
                result = generate_with_exemplar(features, ex, req.class_label, req.seed, cfg, backbone_, hooks);
            } else {
                result = generate(features, req.class_label, req.seed, cfg, backbone_, hooks);
            }
            auto png = encode_png(result.image);
            std::lock_guard lock(mu_);
            auto& rec = records_.at(job.id);
            rec.output_refs["result"] = "/jobs/" + job.id + "/result";
            rec.output_refs["trace"] = "/jobs/" + job.id + "/trace";
            rec.output_refs["result_sha256"] = sha256_hex(png);
            rec.result_png = std::move(png);
            rec.state = JobState::done;
        } catch (const std::exception& e) {
            std::lock_guard lock(mu_);
            auto& rec = records_.at(job.id);
            rec.error = e.what();
            rec.state = JobState::failed;
        }
    }

    B backbone_;
    PipelineConfig config_;
    std::size_t cap_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Pending> pending_;
    std::map<std::string, JobRecord> records_;
    std::uint64_t next_id_ = 0;
    bool stopping_ = false;
    bool held_ = false;
    std::thread worker_;
};

namespace detail {

inline void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <class T>
std::optional<T> parse_number(const std::string& text) {
    try {
        std::size_t used = 0;
        T v;
        if constexpr (std::is_same_v<T, double>) v = std::stod(text, &used);
        else if constexpr (std::is_same_v<T, int>) v = std::stoi(text, &used);
        else v = static_cast<T>(std::stoull(text, &used));
        if (used != text.size()) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace detail

// Routes:
//   POST /jobs/generate   multipart: sketch (PNG), class, seed, beta[, guided_steps]
//   POST /jobs/edit       same plus exemplar (PNG)
//   GET  /jobs/{id}       JobRecord JSON
//   GET  /jobs/{id}/result  PNG (409 until done)
//   GET  /jobs/{id}/trace   guidance trace, JSON lines
//   GET  /healthz
template <Denoiser B>
void mount_routes(httplib::Server& server, JobService<B>& service) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

    auto submit = [&service](JobKind kind) {
        return [&service, kind](const httplib::Request& req, httplib::Response& res) {
            if (!req.is_multipart_form_data()) {
                return detail::json_reply(res, 400, {{"error", "expected multipart/form-data"}});
            }
            JobRequest job;
            job.kind = kind;
            try {
                if (!req.has_file("sketch")) throw parameter_error("missing 'sketch' part");
                const auto& sketch = req.get_file_value("sketch");
                const std::vector<std::uint8_t> sketch_bytes(sketch.content.begin(), sketch.content.end());
                job.sketch = decode_png(sketch_bytes);
                job.input_refs["sketch_sha256"] = sha256_hex(sketch_bytes);
                if (!req.has_file("class")) throw parameter_error("missing 'class' field");
                job.class_label = req.get_file_value("class").content;
                build_prompts(job.class_label);
                job.input_refs["class"] = job.class_label;
                if (req.has_file("seed")) {
                    auto seed = detail::parse_number<std::uint64_t>(req.get_file_value("seed").content);
                    if (!seed) throw parameter_error("bad 'seed'");
                    job.seed = *seed;
                }
                job.input_refs["seed"] = std::to_string(job.seed);
                if (req.has_file("beta")) {
                    job.beta = detail::parse_number<double>(req.get_file_value("beta").content);
                    if (!job.beta || *job.beta < 0.0) throw parameter_error("bad 'beta'");
                }
                if (req.has_file("guided_steps")) {
                    job.guided_steps = detail::parse_number<int>(req.get_file_value("guided_steps").content);
                    if (!job.guided_steps || *job.guided_steps < 0 ||
                        *job.guided_steps > service.config().schedule.num_inference_steps) {
                        throw parameter_error("bad 'guided_steps'");
                    }
                }
                if (kind == JobKind::edit) {
                    if (!req.has_file("exemplar")) throw parameter_error("missing 'exemplar' part");
                    const auto& ex = req.get_file_value("exemplar");
                    const std::vector<std::uint8_t> ex_bytes(ex.content.begin(), ex.content.end());
                    job.exemplar = decode_png(ex_bytes);
                    job.input_refs["exemplar_sha256"] = sha256_hex(ex_bytes);
                }
            } catch (const error& e) {
                return detail::json_reply(res, 400, {{"error", e.what()}});
            }
            try {
                const std::string id = service.submit(std::move(job));
                detail::json_reply(res, 202, {{"id", id}});
            } catch (const queue_full_error& e) {
                detail::json_reply(res, 503, {{"error", e.what()}});
            }
        };
    };
    server.Post("/jobs/generate", submit(JobKind::generate));
    server.Post("/jobs/edit", submit(JobKind::edit));

    server.Get(R"(/jobs/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        const auto rec = service.get(req.matches[1]);
        if (!rec) return detail::json_reply(res, 404, {{"error", "unknown job"}});
        detail::json_reply(res, 200, rec->to_json());
    });
    server.Get(R"(/jobs/([^/]+)/result)", [&service](const httplib::Request& req, httplib::Response& res) {
        const auto rec = service.get(req.matches[1]);
        if (!rec) return detail::json_reply(res, 404, {{"error", "unknown job"}});
        if (rec->state != JobState::done) {
            return detail::json_reply(res, 409, {{"error", "job is " + to_string(rec->state)}, {"detail", rec->error}});
        }
        res.status = 200;
        res.set_content(std::string(rec->result_png.begin(), rec->result_png.end()), "image/png");
    });
    server.Get(R"(/jobs/([^/]+)/trace)", [&service](const httplib::Request& req, httplib::Response& res) {
        const auto rec = service.get(req.matches[1]);
        if (!rec) return detail::json_reply(res, 404, {{"error", "unknown job"}});
        res.status = 200;
        res.set_content(rec->trace_jsonl, "application/x-ndjson");
    });
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        detail::json_reply(res, 200, {{"status", "ok"}});
    });
}

} // namespace sketchguide
