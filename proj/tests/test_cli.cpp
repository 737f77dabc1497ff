#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const std::string kCli = KSPACE_CLI;
const std::string kData = KSPACE_DATA_DIR;

int run(const std::string& args) {
    const int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kspace_cli_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("metrics command: fixtures and diagnostics") {
    const fs::path out = scratch("metrics");
    CHECK(run("metrics --matrix " + kData + "/sr_ours.csv --out " + out.string()) == 0);
    const std::string csv = slurp(out / "metrics.csv");
    CHECK(csv.rfind("# config_hash=", 0) == 0);
    CHECK(csv.find("FR,33.97") != std::string::npos);
    CHECK(csv.find("PFR,29.80") != std::string::npos);
    CHECK(csv.find("FT,42.88") != std::string::npos);

    const fs::path bad = out / "bad.csv";
    std::ofstream(bad) << "s,a,b\nx,1,2\ny,3,101\n";
    CHECK(run("metrics --matrix " + bad.string() + " --out " + out.string()) == 3);
    CHECK(run("metrics --matrix " + (out / "missing.csv").string() + " --out " + out.string()) == 2);
    CHECK(run("metrics --out " + out.string()) == 3);  // --matrix is required
    CHECK(run("no-such-command") == 3);
}

TEST_CASE("fit, anchors, train-decoder wiring and exit codes") {
    const fs::path out = scratch("fit");
    const fs::path nested = out / "a" / "b";
    CHECK(run("fit --out " + nested.string()) == 0);
    for (int t = 0; t < 5; ++t) {
        CHECK(fs::exists(nested / ("tks_task" + std::to_string(t) + ".json")));
        CHECK(fs::exists(nested / ("fks_task" + std::to_string(t) + ".json")));
    }
    CHECK(slurp(nested / "k_growth.csv").find("4,give_way,20,5,5") != std::string::npos);

    CHECK(run("anchors --snapshot " + (nested / "tks_task0.json").string() + " --out " + out.string()) == 0);
    const std::string anchors = slurp(out / "anchors_tks_task0.csv");
    CHECK(std::count(anchors.begin(), anchors.end(), '\n') == 3);  // header comment, header, one anchor
    CHECK(run("anchors --snapshot " + (out / "nope.json").string() + " --out " + out.string()) == 2);
    std::ofstream(out / "garbage.json") << "{\"schema_version\": 1}";
    CHECK(run("anchors --snapshot " + (out / "garbage.json").string() + " --out " + out.string()) == 3);

    CHECK(run("fit --out /proc/kspace_unwritable") == 2);

    const fs::path cfg = out / "bad_config.json";
    std::ofstream(cfg) << R"({"inference": {"passes": 0}})";
    CHECK(run("fit --config " + cfg.string() + " --out " + out.string()) == 3);

    const fs::path short_cfg = out / "short.json";
    std::ofstream(short_cfg) << R"({"decoder": {"train": {"steps": 3}, "per_archetype": 10, "heldout_per_archetype": 5}})";
    CHECK(run("train-decoder --config " + short_cfg.string() + " --tks " + (nested / "tks_task2.json").string() +
              " --out " + out.string()) == 0);
    const std::string trace = slurp(out / "loss_trace.csv");
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 2 + 4);
    CHECK(slurp(out / "eval.txt").find("samples 15") != std::string::npos);
    CHECK(run("train-decoder --tks " + (out / "missing.json").string() + " --out " + out.string()) == 2);
}

TEST_CASE("gradcheck command: pass, and corrupted gradients fail") {
    const fs::path out = scratch("grad");
    CHECK(run("gradcheck --out " + out.string()) == 0);
    CHECK(slurp(out / "gradcheck.csv").find("FAIL") == std::string::npos);
    CHECK(run("gradcheck --corrupt --out " + out.string()) == 1);
    CHECK(slurp(out / "gradcheck.csv").find("FAIL") != std::string::npos);
}
