// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include <sketchguide/cli.hpp>

#include "test_support.hpp"

using namespace sketchguide;
using namespace std::chrono_literals;

namespace {

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    const auto b = read_file_bytes(p);
    return {b.begin(), b.end()};
}

struct CliFixture : ::testing::Test {
    sgtest::TempDir dir{"sg-cli"};
    std::string sketch = (dir / "sketch.png").string();
    std::string photo = (dir / "photo.png").string();
    void SetUp() override {
        write_png(sketch, sgtest::fixture_sketch());
        write_png(photo, sgtest::fixture_photo());
    }
};

} // namespace

TEST_F(CliFixture, UsageErrorsExitOne) {
    auto r = cli({});
    EXPECT_EQ(r.code, 1);
    r = cli({"generate"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--sketch"), std::string::npos);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    r = cli({"generate", "--sketch", sketch, "--class", "cat", "--out", "x.png", "--bogus"});
    EXPECT_EQ(r.code, 1);
    r = cli({"generate", "--sketch", (dir / "none.png").string(), "--class", "cat", "--out", "x.png"});
    EXPECT_EQ(r.code, 1);
    r = cli({"generate", "--sketch", sketch, "--class", "cat", "--out", "x.png", "--beta", "-1"});
    EXPECT_EQ(r.code, 1);
    r = cli({"generate", "--sketch", sketch, "--class", "cat", "--out", "x.png", "--guided-steps", "60"});
    EXPECT_EQ(r.code, 1);
    r = cli({"analyze", "--out-dir", dir.path().string()});
    EXPECT_EQ(r.code, 1);
    r = cli({"frobnicate"});
    EXPECT_EQ(r.code, 1);
}

TEST_F(CliFixture, HelpExitsZero) {
    const auto r = cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("generate"), std::string::npos);
    EXPECT_NE(r.out.find("serve"), std::string::npos);
}

TEST_F(CliFixture, GenerateWritesImageManifestAndTrace) {
    const auto out = (dir / "out.png").string();
    const auto r = cli({"generate", "--sketch", sketch, "--class", "cat", "--seed", "42", "--backbone", "toy",
                        "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NO_THROW(read_png(out));
    const auto manifest = nlohmann::json::parse(slurp(dir / "out.manifest.json"));
    EXPECT_EQ(manifest.at("seed").get<int>(), 42);
    EXPECT_EQ(manifest.at("steps_performed").get<int>(), 50);
    EXPECT_EQ(manifest.at("input_hashes").at("sketch_file").get<std::string>(), sha256_hex(read_file_bytes(sketch)));
    EXPECT_EQ(parse_trace(slurp(dir / "out.trace.jsonl")).size(), 25u);
}

TEST_F(CliFixture, RunsAreBitIdentical) {
    const auto a = (dir / "a.png").string(), b = (dir / "b.png").string();
    ASSERT_EQ(cli({"generate", "--sketch", sketch, "--class", "cat", "--seed", "7", "--out", a}).code, 0);
    ASSERT_EQ(cli({"generate", "--sketch", sketch, "--class", "cat", "--seed", "7", "--out", b}).code, 0);
    EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
    EXPECT_EQ(slurp(dir / "a.trace.jsonl"), slurp(dir / "b.trace.jsonl"));
}

TEST_F(CliFixture, CheckpointBackboneIsARuntimeFailure) {
    const auto r = cli({"generate", "--sketch", sketch, "--class", "cat", "--backbone", "checkpoint", "--out",
                        (dir / "c.png").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
}

TEST_F(CliFixture, ConfigFileIsOverriddenByFlags) {
    const auto cfg = dir / "run.toml";
    write_file_bytes(cfg, [] {
        const std::string s = "[generate]\nbeta = 0.25\nguided-steps = 10\n";
        return std::vector<std::uint8_t>(s.begin(), s.end());
    }());
    const auto out = (dir / "cfg.png").string();
    auto r = cli({"--config", cfg.string(), "generate", "--sketch", sketch, "--class", "cat", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    auto m = nlohmann::json::parse(slurp(dir / "cfg.manifest.json"));
    EXPECT_EQ(m.at("config").at("beta").get<double>(), 0.25);
    EXPECT_EQ(m.at("config").at("guided_steps").get<int>(), 10);
    r = cli({"--config", cfg.string(), "generate", "--sketch", sketch, "--class", "cat", "--out", out, "--beta",
             "0.5"});
    ASSERT_EQ(r.code, 0) << r.err;
    m = nlohmann::json::parse(slurp(dir / "cfg.manifest.json"));
    EXPECT_EQ(m.at("config").at("beta").get<double>(), 0.5);
    EXPECT_EQ(m.at("config").at("guided_steps").get<int>(), 10);
}

TEST_F(CliFixture, EditInvertExtract) {
    const auto out = (dir / "edit.png").string();
    auto r = cli({"edit", "--sketch", sketch, "--class", "cat", "--exemplar", photo, "--seed", "3", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = nlohmann::json::parse(slurp(dir / "edit.manifest.json"));
    EXPECT_EQ(m.at("substituted_step_indices").size(), 46u);

    const auto traj = (dir / "traj.skgc").string();
    r = cli({"invert", "--image", photo, "--prompt", "a photo of a cat", "--out", traj});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(trajectory_from_container(load_container(traj)).entries.size(), 51u);

    r = cli({"extract", "--sketch", sketch, "--class", "cat", "--out-dir", (dir / "feat").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(stack_from_container(load_container(dir / "feat/stack.skgc")).entries.size(), 51u);

    // A latent container works as the sketch input as well.
    const auto out2 = (dir / "from_latent.png").string();
    r = cli({"generate", "--sketch", (dir / "feat/trajectory.skgc").string(), "--class", "cat", "--out", out2});
    EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(CliFixture, AnalyzeLatentSetsAndTraces) {
    std::filesystem::create_directories(dir / "a");
    std::filesystem::create_directories(dir / "b");
    for (int i = 0; i < 5; ++i) {
        save_container(dir / ("a/z" + std::to_string(i) + ".skgc"),
                       to_container(sgtest::random_latent({4, 8, 8}, 10 + i)));
        save_container(dir / ("b/z" + std::to_string(i) + ".skgc"),
                       to_container(sgtest::random_latent({4, 8, 8}, 20 + i, 0.5)));
    }
    auto r = cli({"analyze", "--set-a", (dir / "a").string(), "--set-b", (dir / "b").string(), "--out-dir",
                  (dir / "report").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("report.json"), std::string::npos);
    EXPECT_NE(r.out.find("histogram.csv"), std::string::npos);
    const auto rep = nlohmann::json::parse(slurp(dir / "report/report.json"));
    EXPECT_GT(rep.at("variance_ratio").get<double>(), 2.0);
    EXPECT_EQ(slurp(dir / "report/histogram.csv").rfind("bin_lo,bin_hi,count_a,count_b\n", 0), 0u);

    // PNG sets are inverted first.
    std::filesystem::create_directories(dir / "photos");
    write_png(dir / "photos/p.png", sgtest::fixture_photo());
    r = cli({"analyze", "--set-a", (dir / "photos").string(), "--set-b", (dir / "a").string(), "--out-dir",
             (dir / "report2").string(), "--steps", "10"});
    ASSERT_EQ(r.code, 0) << r.err;

    const auto out = (dir / "t.png").string();
    ASSERT_EQ(cli({"generate", "--sketch", sketch, "--class", "cat", "--out", out}).code, 0);
    r = cli({"analyze", "--trace", (dir / "t.trace.jsonl").string(), "--out-dir", (dir / "tr").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto tr = nlohmann::json::parse(slurp(dir / "tr/trace_report.json"));
    EXPECT_EQ(tr.at("rows").size(), 25u);

    r = cli({"analyze", "--set-a", (dir / "empty").string(), "--set-b", (dir / "a").string(), "--out-dir",
             (dir / "r3").string()});
    EXPECT_EQ(r.code, 2);
}

// ---------------------------------------------------------------------------

namespace {

class ServiceFixture : public ::testing::Test {
protected:
    void SetUp() override {
        mount_routes(server_, service_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        ASSERT_GT(port_, 0);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
        client_->set_read_timeout(30, 0);
        sketch_png_ = encode_png(sgtest::fixture_sketch());
        photo_png_ = encode_png(sgtest::fixture_photo());
    }
    void TearDown() override {
        service_.release();
        server_.stop();
        thread_.join();
    }

    httplib::Result submit(const std::string& kind, const std::string& seed = "42", const std::string& beta = "1.0",
                           bool with_exemplar = false) {
        httplib::MultipartFormDataItems items{
            {"sketch", std::string(sketch_png_.begin(), sketch_png_.end()), "sketch.png", "image/png"},
            {"class", "cat", "", ""},
            {"seed", seed, "", ""},
            {"beta", beta, "", ""},
        };
        if (with_exemplar) {
            items.push_back({"exemplar", std::string(photo_png_.begin(), photo_png_.end()), "ex.png", "image/png"});
        }
        return client_->Post("/jobs/" + kind, items);
    }

    nlohmann::json record(const std::string& id) {
        auto res = client_->Get("/jobs/" + id);
        EXPECT_TRUE(res);
        return nlohmann::json::parse(res->body);
    }

    nlohmann::json wait_done(const std::string& id) {
        const auto deadline = std::chrono::steady_clock::now() + 60s;
        for (;;) {
            auto rec = record(id);
            const auto state = rec.at("state").get<std::string>();
            if (state == "done" || state == "failed") return rec;
            if (std::chrono::steady_clock::now() > deadline) return rec;
            std::this_thread::sleep_for(2ms);
        }
    }

    JobService<ToyBackbone> service_{ToyBackbone{}, PipelineConfig{}};
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::unique_ptr<httplib::Client> client_;
    std::vector<std::uint8_t> sketch_png_, photo_png_;
};

std::string job_id(const httplib::Result& res) { return nlohmann::json::parse(res->body).at("id").get<std::string>(); }

} // namespace

TEST_F(ServiceFixture, Healthz) {
    auto res = client_->Get("/healthz");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServiceFixture, GenerateLifecycle) {
    auto res = submit("generate");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 202) << res->body;
    const std::string id = job_id(res);
    const auto rec = wait_done(id);
    ASSERT_EQ(rec.at("state"), "done") << rec.dump();
    EXPECT_EQ(rec.at("kind"), "generate");
    EXPECT_EQ(rec.at("progress").at("completed").get<int>(), 50);
    EXPECT_EQ(rec.at("progress").at("total").get<int>(), 50);
    EXPECT_EQ(rec.at("input_refs").at("class"), "cat");

    auto png = client_->Get("/jobs/" + id + "/result");
    ASSERT_TRUE(png);
    EXPECT_EQ(png->status, 200);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    const Image img = decode_png(std::vector<std::uint8_t>(png->body.begin(), png->body.end()));
    EXPECT_EQ(img.width, 64);

    auto trace = client_->Get("/jobs/" + id + "/trace");
    ASSERT_TRUE(trace);
    EXPECT_EQ(parse_trace(trace->body).size(), 25u);
}

TEST_F(ServiceFixture, EditLifecycle) {
    auto res = submit("edit", "5", "1.0", true);
    ASSERT_EQ(res->status, 202) << res->body;
    const auto rec = wait_done(job_id(res));
    EXPECT_EQ(rec.at("state"), "done") << rec.dump();
    EXPECT_EQ(rec.at("kind"), "edit");
    EXPECT_TRUE(rec.at("input_refs").contains("exemplar_sha256"));
    auto missing = submit("edit", "5", "1.0", false);
    EXPECT_EQ(missing->status, 400);
}

TEST_F(ServiceFixture, UnknownJobIs404) {
    for (const char* path : {"/jobs/nope", "/jobs/nope/result", "/jobs/nope/trace"}) {
        auto res = client_->Get(path);
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, 404) << path;
    }
}

TEST_F(ServiceFixture, ResultBeforeCompletionIs409) {
    service_.hold();
    auto res = submit("generate");
    ASSERT_EQ(res->status, 202);
    const std::string id = job_id(res);
    EXPECT_EQ(record(id).at("state"), "queued");
    auto early = client_->Get("/jobs/" + id + "/result");
    EXPECT_EQ(early->status, 409);
    service_.release();
    EXPECT_EQ(wait_done(id).at("state"), "done");
    EXPECT_EQ(client_->Get("/jobs/" + id + "/result")->status, 200);
}

TEST_F(ServiceFixture, QueueCapIs16) {
    service_.hold();
    for (int i = 0; i < 16; ++i) ASSERT_EQ(submit("generate", std::to_string(i))->status, 202);
    EXPECT_EQ(submit("generate", "99")->status, 503);
    EXPECT_EQ(service_.queued(), 16u);
}

TEST_F(ServiceFixture, MalformedInputIs400) {
    httplib::MultipartFormDataItems no_sketch{{"class", "cat", "", ""}};
    EXPECT_EQ(client_->Post("/jobs/generate", no_sketch)->status, 400);
    httplib::MultipartFormDataItems bad_png{{"sketch", "not a png", "s.png", "image/png"}, {"class", "cat", "", ""}};
    EXPECT_EQ(client_->Post("/jobs/generate", bad_png)->status, 400);
    EXPECT_EQ(submit("generate", "42", "abc")->status, 400);
    EXPECT_EQ(submit("generate", "-x")->status, 400);
    EXPECT_EQ(client_->Post("/jobs/generate", "{}", "application/json")->status, 400);
    httplib::MultipartFormDataItems steps{
        {"sketch", std::string(sketch_png_.begin(), sketch_png_.end()), "s.png", "image/png"},
        {"class", "cat", "", ""},
        {"guided_steps", "99", "", ""}};
    EXPECT_EQ(client_->Post("/jobs/generate", steps)->status, 400);
}

TEST_F(ServiceFixture, FifoOrderAndConsistentProgress) {
    service_.hold();
    std::vector<std::string> ids;
    for (int i = 0; i < 3; ++i) ids.push_back(job_id(submit("generate", std::to_string(i))));
    service_.release();
    std::map<std::string, int> last_completed;
    const auto deadline = std::chrono::steady_clock::now() + 60s;
    for (;;) {
        std::vector<nlohmann::json> recs(3);
        // Later jobs first: states only move forward.
        for (int i = 2; i >= 0; --i) recs[i] = record(ids[i]);
        for (int i = 0; i < 3; ++i) {
            const auto state = recs[i].at("state").get<std::string>();
            const auto& prog = recs[i].at("progress");
            const int completed = prog.at("completed").get<int>();
            EXPECT_EQ(prog.at("trace_step").get<int>(), std::min(completed, 25));
            EXPECT_GE(completed, last_completed[ids[i]]);
            last_completed[ids[i]] = completed;
            if (state != "queued") {
                for (int j = 0; j < i; ++j) EXPECT_EQ(recs[j].at("state"), "done");
            }
        }
        if (recs[2].at("state") == "done" || std::chrono::steady_clock::now() > deadline) break;
    }
    EXPECT_EQ(record(ids[2]).at("state"), "done");
}

TEST_F(ServiceFixture, HttpResultMatchesCliOutputByteForByte) {
    sgtest::TempDir dir("sg-http-cli");
    write_file_bytes(dir / "sketch.png", sketch_png_);
    const auto out = (dir / "cli.png").string();
    ASSERT_EQ(cli({"generate", "--sketch", (dir / "sketch.png").string(), "--class", "cat", "--seed", "42",
                   "--beta", "1.0", "--out", out})
                  .code,
              0);
    auto res = submit("generate", "42", "1.0");
    const std::string id = job_id(res);
    ASSERT_EQ(wait_done(id).at("state"), "done");
    const auto body = client_->Get("/jobs/" + id + "/result")->body;
    EXPECT_EQ(std::vector<std::uint8_t>(body.begin(), body.end()), read_file_bytes(out));
    EXPECT_EQ(client_->Get("/jobs/" + id + "/trace")->body, slurp(dir / "cli.trace.jsonl"));
}
