#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "capscl_cli_test";

int run(const std::string& args) {
    const std::string cmd = std::string(CAPSCL_CLI_PATH) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string p(const std::string& rel) { return (kRoot / rel).string(); }

const char* kSynth = "synth --kind similar --tasks 2 --train 40 --validation 16 --test 40 --vocab 64 --max-tokens 10 "
                     "--keywords 3 --seed 4 --out ";

void write_config() {
    const json c = {{"backbone", {{"vocab_size", 64}, {"max_tokens", 10}, {"embed_dim", 16}, {"ffn_dim", 32}}},
                    {"ksm", {{"num_transfer_capsules", 2}, {"capsule_dim", 8}, {"route_dim", 8}}},
                    {"tsm", {{"width", 16}}},
                    {"trainer", {{"lr", 0.005}, {"batch_size", 16}, {"epochs", 2}}}};
    std::ofstream(kRoot / "run.json") << c.dump(2);
}

struct Fixture {
    Fixture() {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        write_config();
    }
    ~Fixture() { fs::remove_all(kRoot); }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "synth writes a deterministic suite") {
    REQUIRE(run(kSynth + p("a")) == 0);
    REQUIRE(run(kSynth + p("b")) == 0);
    for (const char* f : {"suite.json", "task_0.jsonl", "task_1.jsonl"}) {
        CHECK(fs::exists(kRoot / "a" / f));
        CHECK(slurp(kRoot / "a" / f) == slurp(kRoot / "b" / f));
    }
    CHECK(run("synth --kind alike --out " + p("c")) == 2);
    CHECK(slurp(kRoot / "last.log").find("alike") != std::string::npos);
    CHECK(run("synth") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("--help") == 0);
}

TEST_CASE_FIXTURE(Fixture, "train, eval and report") {
    REQUIRE(run(kSynth + p("suite")) == 0);
    const std::string train = "train --config " + p("run.json") + " --suite " + p("suite");
    REQUIRE(run(train + " --mode ctr --seed 3 --out " + p("ctr")) == 0);
    CHECK(fs::exists(kRoot / "ctr" / "manifest.json"));
    const json m = json::parse(slurp(kRoot / "ctr" / "metrics.json"));
    CHECK(m["mode"] == "ctr");
    CHECK(m["seed"] == 3);
    CHECK(m["accuracy_matrix"][1][0].is_number());

    // Same config, seed and output path, same bytes.
    const std::string first = slurp(kRoot / "ctr" / "metrics.json");
    const std::string tensor = slurp(kRoot / "ctr" / "tensors" / "head0.weight.f32");
    REQUIRE(run(train + " --mode ctr --seed 3 --out " + p("ctr")) == 0);
    CHECK(slurp(kRoot / "ctr" / "metrics.json") == first);
    CHECK(slurp(kRoot / "ctr" / "tensors" / "head0.weight.f32") == tensor);

    // Evaluating the checkpoint reproduces the final row.
    REQUIRE(run("eval --checkpoint " + p("ctr") + " --suite " + p("suite") + " --out " + p("eval.json")) == 0);
    const json e = json::parse(slurp(kRoot / "eval.json"));
    REQUIRE(e["tasks"].size() == 2);
    for (std::size_t t = 0; t < 2; ++t) CHECK(e["tasks"][t]["accuracy"] == m["accuracy_matrix"][1][t]);

    REQUIRE(run(train + " --mode sdl --seed 3 --seed 4 --out " + p("sdl")) == 0);
    for (const char* s : {"seed_3", "seed_4"}) {
        const json r = json::parse(slurp(kRoot / "sdl" / s / "metrics.json"));
        CHECK(r["accuracy_matrix"][1][0].is_null());
        CHECK(r["forgetting_rate"].is_null());
        CHECK_FALSE(fs::exists(kRoot / "sdl" / s / "manifest.json"));
    }

    REQUIRE(run("report " + p("ctr") + " " + p("sdl/seed_3") + " " + p("sdl/seed_4/metrics.json") + " --out " +
                p("summary")) == 0);
    const std::string csv = slurp(kRoot / "summary" / "summary.csv");
    CHECK(csv.find("\nctr,1,") != std::string::npos);
    CHECK(csv.find("\nsdl,2,") != std::string::npos);
    CHECK(fs::exists(kRoot / "summary" / "summary.txt"));

    // Failures exit non-zero with a message.
    CHECK(run(train + " --mode ctr --order 0,0 --out " + p("bad")) != 0);
    CHECK(run(train + " --mode hat --out " + p("bad")) != 0);
    CHECK(run("train --config " + p("run.json") + " --suite " + p("missing") + " --out " + p("bad")) != 0);
    CHECK(run("eval --checkpoint " + p("missing")) != 0);
    CHECK(run("report " + p("missing")) != 0);
    std::ofstream(kRoot / "typo.json") << R"({"ksm": {"capsule_dimm": 4}})";
    CHECK(run("train --config " + p("typo.json") + " --suite " + p("suite") + " --out " + p("bad")) == 1);
    CHECK(slurp(kRoot / "last.log").find("ksm.capsule_dimm: unknown key") != std::string::npos);
}
