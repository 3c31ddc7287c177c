#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

#include "image2pci/annotation.hpp"
#include "image2pci/image_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCurves = (test::source_dir() / "data" / "curves_d6433_approx.json").string();

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args, const fs::path& cwd) {
    const fs::path out = cwd / "stdout.txt";
    const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(I2P_CLI) + "' " + args + " > '" +
                            out.string() + "' 2> '" + (cwd / "stderr.txt").string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

std::string tree_digest(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) {
        all += fs::relative(f, root).string() + "\n" + i2p::read_file_bytes(f) + "\n";
    }
    return all;
}

} // namespace

TEST_CASE("synth is deterministic for a fixed seed") {
    test::TempDir dir;
    REQUIRE(cli("synth --out a --count 10 --seed 7 --size 64 --curves " + kCurves, dir.path()).code == 0);
    REQUIRE(cli("synth --out b --count 10 --seed 7 --size 64 --curves " + kCurves, dir.path()).code == 0);
    REQUIRE(cli("synth --out c --count 10 --seed 8 --size 64 --curves " + kCurves, dir.path()).code == 0);
    CHECK(tree_digest(dir.path() / "a") == tree_digest(dir.path() / "b"));
    CHECK(tree_digest(dir.path() / "a") != tree_digest(dir.path() / "c"));
    CHECK(fs::exists(dir.path() / "a" / "train.txt"));
}

TEST_CASE("label writes 100 for images without annotations") {
    test::TempDir dir;
    const fs::path d = dir.path() / "d";
    fs::create_directories(d / "annotations");
    fs::create_directories(d / "images");
    std::vector<std::string> manifest;
    for (int i = 0; i < 3; ++i) {
        const std::string id = "empty" + std::to_string(i);
        i2p::save_annotation_file({id, 32, 32, {640.0, 640.0}, {}, std::nullopt}, d / "annotations" / (id + ".json"));
        i2p::write_png(i2p::image_path(d, id), i2p::GrayImage(32, 32, 140));
        manifest.push_back("annotations/" + id + ".json");
    }
    i2p::write_manifest(d / "manifest.txt", manifest);
    const Run r = cli("label --data d --curves " + kCurves, dir.path());
    REQUIRE(r.code == 0);
    for (const auto& a : i2p::parse_dataset(d)) {
        REQUIRE(a.pci_label.has_value());
        CHECK(*a.pci_label == 100.0);
    }
}

TEST_CASE("train then eval writes a report") {
    test::TempDir dir;
    REQUIRE(cli("synth --out d --count 20 --seed 3 --size 64 --curves " + kCurves, dir.path()).code == 0);
    {
        std::ofstream net(dir.path() / "net.json");
        net << R"({"base_width": 4, "input_hw": [64, 64], "pci_hidden": 8})";
    }
    REQUIRE(cli("train --data d --ckpt m.bin --net net.json --epochs 1 --seed 2 --metrics m.ndjson", dir.path()).code == 0);
    CHECK(fs::exists(dir.path() / "m.bin"));
    CHECK(fs::exists(dir.path() / "m.bin.json"));
    REQUIRE(cli("eval --data d --ckpt m.bin --report r.json", dir.path()).code == 0);
    std::ifstream in(dir.path() / "r.json");
    const json report = json::parse(in);
    CHECK(report.contains("r2"));
    CHECK(report.contains("mape_pct"));
    CHECK(report["n"] == 2);

    const Run inf = cli("infer --ckpt m.bin --image d/images/syn_00000.png", dir.path());
    REQUIRE(inf.code == 0);
    CHECK(json::parse(inf.out).contains("mask_rle"));
}

TEST_CASE("exit codes") {
    test::TempDir dir;
    CHECK(cli("", dir.path()).code == 1);
    CHECK(cli("frobnicate", dir.path()).code == 1);
    CHECK(cli("stats --data . --no-such-flag", dir.path()).code == 1);
    CHECK(cli("stats", dir.path()).code == 1);
    CHECK(cli("stats --data missing", dir.path()).code == 2);
    CHECK(cli("label --data missing --curves " + kCurves, dir.path()).code == 2);
    CHECK(cli("synth --out x --curves nowhere.json", dir.path()).code == 2);
    CHECK(cli("infer --ckpt none.bin --image none.png", dir.path()).code == 2);
    CHECK(cli("--help", dir.path()).code == 0);
}
