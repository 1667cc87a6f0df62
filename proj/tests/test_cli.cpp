// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lgpool/cli/run_config.hpp"

using namespace lgp;
using namespace lgp::cli;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(LGPOOL_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return {-1, ""};
    std::string out;
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class TempDir {
public:
    TempDir() : path_(fs::temp_directory_path() / ("lgpool_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++))) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name, const std::string& text) const {
        const auto p = (path_ / name).string();
        std::ofstream(p) << text;
        return p;
    }

private:
    static inline int counter_ = 0;
    fs::path path_;
};

std::vector<std::string> csv_rows(const std::string& out) {
    std::vector<std::string> rows;
    std::istringstream is(out);
    for (std::string line; std::getline(is, line);)
        if (!line.empty() && line[0] != '#') rows.push_back(line);
    return rows;
}

}  // namespace

// ---- config resolution ----

TEST(Config, EmptyFileGivesMiniDefaults) {
    TempDir d;
    const auto c = resolve_config(d.file("empty.yaml", ""), {});
    EXPECT_EQ(c.profile, "mini");
    EXPECT_EQ(c.alpha, 0.5);
    EXPECT_EQ(c.tau, 1.0);
    EXPECT_EQ(c.low_config().dim, 16u);
    EXPECT_EQ(c.high_config().dim, 64u);
    EXPECT_EQ(c.depth(), 3u);
    EXPECT_EQ(to_json(c), to_json(resolve_config(std::nullopt, {})));
}

TEST(Config, FlagsOverrideFile) {
    TempDir d;
    const auto f = d.file("c.yaml", "alpha: 0.2\nseed: 7\n");
    EXPECT_EQ(resolve_config(f, {}).alpha, 0.2);
    const auto c = resolve_config(f, {{"alpha", "0.3"}});
    EXPECT_EQ(c.alpha, 0.3);
    EXPECT_EQ(c.seed, 7u);
}

TEST(Config, ErrorsNameTheKey) {
    TempDir d;
    auto key_of = [](const std::function<void()>& f) {
        try {
            f();
        } catch (const ConfigError& e) {
            return e.key();
        }
        return std::string("<none>");
    };
    EXPECT_EQ(key_of([&] { resolve_config(d.file("a.yaml", "alpha: 1.5\n"), {}); }), "alpha");
    EXPECT_EQ(key_of([&] { resolve_config(d.file("b.yaml", "learning_rate: 1\n"), {}); }), "learning_rate");
    EXPECT_EQ(key_of([&] { resolve_config(d.file("c.yaml", "seed: -3\n"), {}); }), "seed");
    EXPECT_EQ(key_of([&] { resolve_config(d.file("d.yaml", "tau: [1, 2]\n"), {}); }), "tau");
    EXPECT_EQ(key_of([&] { resolve_config(d.file("e.yaml", "teacher: maybe\n"), {}); }), "teacher");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"tau", "0"}}); }), "tau");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"stitch_init", "none"}}); }), "stitch_init");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"path", "k9m9"}}); }), "path");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"low_dim", "128"}}); }), "low_dim");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"pool", "5"}}); }), "pool");
    EXPECT_EQ(key_of([&] { resolve_config(std::nullopt, {{"profile", "huge"}}); }), "profile");
    EXPECT_THROW(resolve_config(d.str() + "/missing.yaml", {}), ValidationError);
    EXPECT_THROW(resolve_config(d.file("f.yaml", "- 1\n- 2\n"), {}), ValidationError);
}

TEST(Config, DeitProfileRecordsFullSchedule) {
    const auto c = resolve_config(std::nullopt, {{"profile", "deit"}});
    EXPECT_EQ(c.distill_epochs, 100u);
    EXPECT_EQ(c.finetune_epochs, 50u);
    EXPECT_EQ(c.batch_size, 128u);
    EXPECT_EQ(c.pool_config().low, profiles::deit_tiny(6));
    EXPECT_EQ(c.pool_config().high, profiles::deit_base(6));
}

TEST(Config, EchoAndHash) {
    const auto a = resolve_config(std::nullopt, {});
    const auto text = echo(a);
    for (const auto& k : config_keys()) EXPECT_NE(text.find(std::string(k.name) + ": "), std::string::npos) << k.name;
    EXPECT_EQ(config_hash(a), config_hash(resolve_config(std::nullopt, {})));
    EXPECT_NE(config_hash(a), config_hash(resolve_config(std::nullopt, {{"seed", "1"}})));
    EXPECT_EQ(hex64(0xabc), "0000000000000abc");
}

// ---- the binary ----

TEST(Binary, AccountMatchesPoolTwelveSizes) {
    const auto r = run("-q account --profile deit --pool 12 --mode table");
    ASSERT_EQ(r.code, 0) << r.out;
    const auto rows = csv_rows(r.out);
    ASSERT_EQ(rows.size(), 8u);
    EXPECT_EQ(rows[0], "path_id,k,m,params,flops");
    // Pool 12, descending: params (M) and FLOPs (G).
    const double params[] = {44.04, 36.95, 30.31, 23.66, 17.02, 10.38, 3.05};
    const double flops[] = {8.85, 7.44, 6.09, 4.73, 3.38, 2.03, 0.64};
    for (int i = 0; i < 7; ++i) {
        std::istringstream is(rows[i + 1]);
        std::string id, k, m, p, f;
        std::getline(is, id, ',');
        std::getline(is, k, ',');
        std::getline(is, m, ',');
        std::getline(is, p, ',');
        std::getline(is, f, ',');
        EXPECT_NEAR(std::stod(p) / 1e6, params[i], 0.02 * params[i]) << id;
        EXPECT_NEAR(std::stod(f) / 1e9, flops[i], 0.05 * flops[i]) << id;
    }
}

TEST(Binary, EchoesResolvedConfig) {
    const auto r = run("enumerate --alpha 0.3");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("# alpha: 0.3"), std::string::npos);
    EXPECT_NE(r.out.find("# config_hash: "), std::string::npos);
    EXPECT_EQ(csv_rows(r.out).size(), 5u);
}

TEST(Binary, ExitCodes) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("account --no-such-flag").code, 1);
    EXPECT_EQ(run("--help").code, 0);
    const auto bad = run("-q account --alpha 1.5");
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.out.find("alpha"), std::string::npos);
    TempDir d;
    const auto unknown = run("-q --config " + d.file("c.yaml", "colour: red\n") + " account");
    EXPECT_EQ(unknown.code, 2);
    EXPECT_NE(unknown.out.find("colour"), std::string::npos);
    EXPECT_EQ(run("-q train-ancestry --profile deit").code, 2);
}

TEST(Binary, MissingPrerequisiteNamesTheFile) {
    TempDir d;
    const auto r = run("-q build-pool --workdir " + d.str());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find(d.str() + "/aux_low.lgck"), std::string::npos) << r.out;
    const auto e = run("-q eval --workdir " + d.str());
    EXPECT_EQ(e.code, 2);
    EXPECT_NE(e.out.find(d.str() + "/eval.lgds"), std::string::npos) << e.out;
}

TEST(Binary, NumericFailureExitsThree) {
    TempDir d;
    const std::string common = "-q --workdir " + d.str() + " --train-per-class 2 --eval-per-class 1 --ancestry-epochs 2";
    ASSERT_EQ(run(common + " gen-data").code, 0);
    const auto r = run(common + " --ancestry-lr 1e30 train-ancestry");
    EXPECT_EQ(r.code, 3) << r.out;
    EXPECT_NE(r.out.find("epoch"), std::string::npos);
}

TEST(Binary, PlanReportsInfeasibleBudget) {
    const auto r = run("-q plan --profile deit --pool 18 --max-params 4e6");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("rank,path_id,k,m,params,flops\n"), std::string::npos);
    EXPECT_EQ(r.out.find("\n1,"), std::string::npos);
    EXPECT_NE(r.out.find("smallest path needs 4382824 params"), std::string::npos) << r.out;
    EXPECT_EQ(run("-q plan --profile deit").code, 2);
}

TEST(Binary, ArtifactsEmbedTheResolvedConfig) {
    TempDir d;
    const std::string common = "-q --workdir " + d.str() + " --train-per-class 2 --eval-per-class 1 --ancestry-epochs 1";
    ASSERT_EQ(run(common + " gen-data").code, 0);
    ASSERT_EQ(run(common + " train-ancestry").code, 0);
    const auto a = io::read_file(d.str() + "/ancestry.lgck");
    const auto cfg = resolve_config(std::nullopt, {{"workdir", d.str()}, {"train_per_class", "2"}, {"eval_per_class", "1"}, {"ancestry_epochs", "1"}});
    const std::string text(a.begin(), a.end());
    EXPECT_NE(text.find("\"config_hash\":\"" + hex64(config_hash(cfg)) + "\""), std::string::npos);
    EXPECT_NE(text.find("\"normalization\":{\"mean\":0.5,\"std\":0.25}"), std::string::npos);
    std::ifstream m(d.str() + "/train-ancestry.manifest.json");
    const auto manifest = nlohmann::json::parse(m);
    EXPECT_EQ(manifest.at("config"), to_json(cfg));
    EXPECT_EQ(manifest.at("seed"), 0);
    EXPECT_TRUE(manifest.at("outputs").contains(d.str() + "/ancestry.lgck"));

    // Same config and seed: identical bytes.
    ASSERT_EQ(run(common + " train-ancestry").code, 0);
    EXPECT_EQ(io::read_file(d.str() + "/ancestry.lgck"), a);
}
