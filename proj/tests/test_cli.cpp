#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "test_util.hpp"
#include "vesselkit/cli.hpp"
#include "vesselkit/network.hpp"
#include "vesselkit/nifti.hpp"
#include "vesselkit/phantom.hpp"

using namespace vk;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

// Small phantom set and training config so the end-to-end CLI path stays quick.
const char* kSmallPhantoms = "size=24\nmax_radius=2.5\nmin_radius=1.5\nmax_curves=2\n";
const char* kTinyTrain =
    "levels=2\nbase_channels=4\ngn_groups=2\nkernel_plan=3,3;3,3\ndeep_supervision=false\n"
    "input=raw\npatch_size=8\npatches_per_volume=2\nbatch_size=4\nepochs_stage1=2\nepochs_finetune=1\nlr0=0.003\n";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("edit distance") {
    CHECK(cli::edit_distance("", "") == 0);
    CHECK(cli::edit_distance("train", "train") == 0);
    CHECK(cli::edit_distance("trian", "train") == 2);
    CHECK(cli::edit_distance("kitten", "sitting") == 3);
    CHECK(cli::edit_distance("abc", "") == 3);
}

TEST_CASE("usage errors exit 2 with a suggestion") {
    auto r = run({"trian"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(contains(r.err, "did you mean 'train'"));

    r = run({"phantom", "--sede", "3"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(contains(r.err, "--seed"));

    r = run({});
    CHECK(r.code == cli::kExitUsage);

    vk::test::TempDir d("cli-usage");
    r = run({"predict", "--in", (d / "x.nii").string(), "--out", (d / "y.nii").string()});
    CHECK(r.code == cli::kExitUsage);
    CHECK(contains(r.err, "--model"));

    r = run({"phantom", "--n"});
    CHECK(r.code == cli::kExitUsage);

    r = run({"--help"});
    CHECK(r.code == cli::kExitOk);
    CHECK(contains(r.out, "phantom"));
}

TEST_CASE("domain errors exit 1") {
    vk::test::TempDir d("cli-domain");
    auto r = run({"eval", "--pred", (d / "missing.nii").string(), "--truth", (d / "missing.nii").string()});
    CHECK(r.code == cli::kExitError);
    CHECK(contains(r.err, "I/O error"));

    r = run({"phantom", "--n", "0", "--out", (d / "p").string(), "--dry-run"});
    CHECK(r.code == cli::kExitError);
    r = run({"phantom", "--threads", "many", "--out", (d / "p").string(), "--dry-run"});
    CHECK(r.code == cli::kExitError);
    write_text(d / "bad.cfg", "n 5\n");
    r = run({"phantom", "--config", (d / "bad.cfg").string(), "--dry-run"});
    CHECK(r.code == cli::kExitError);
    CHECK(contains(r.err, "config error"));
}

TEST_CASE("flags override the config file, which overrides defaults") {
    vk::test::TempDir d("cli-prec");
    write_text(d / "p.cfg", "# phantom settings\nn=5\nseed=11\nsize=32\n");
    auto r = run({"phantom", "--config", (d / "p.cfg").string(), "--n", "3", "--out", (d / "o").string(), "--dry-run"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "#   n = 3\n"));
    CHECK(contains(r.out, "#   size = 32\n"));
    CHECK(contains(r.out, "# seed = 11\n"));
    CHECK(contains(r.out, "dry-run ok"));
    CHECK(!std::filesystem::exists(d / "o"));

    r = run({"phantom", "--out", (d / "o").string(), "--dry-run"});
    CHECK(contains(r.out, "#   n = 20\n"));
    CHECK(contains(r.out, "# seed = 0\n"));
}

TEST_CASE("eval of a mask against itself") {
    vk::test::TempDir d("cli-eval");
    const Volume3D m = vk::test::random_mask({10, 9, 8}, 3, 0.2);
    write_nifti(m, d / "a.nii");
    auto r = run({"eval", "--pred", (d / "a.nii").string(), "--truth", (d / "a.nii").string(), "--out",
                  (d / "report.txt").string()});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "mean_dsc=1"));
    CHECK(contains(r.out, "mean_hausdorff_mm=0"));
    CHECK(contains(read_text(d / "report.txt"), "mean_dsc=1"));

    r = run({"eval", "--pred", (d / "a.nii").string() + "," + (d / "a.nii").string(), "--truth",
             (d / "a.nii").string()});
    CHECK(r.code == cli::kExitUsage);
}

TEST_CASE("enhance and patchify") {
    vk::test::TempDir d("cli-enh");
    PhantomSpec s;
    s.dims = {24, 24, 24};
    s.curves = {Curve{{{2.0, 12.0, 12.0}, {21.0, 12.0, 12.0}}, 2.0, 2.0}};
    s.seed = 1;
    const Phantom ph = generate_phantom(s);
    write_nifti(ph.image, d / "img.nii.gz");
    write_nifti(ph.truth, d / "lab.nii.gz");

    auto r = run({"enhance", "--in", (d / "img.nii.gz").string(), "--out", (d / "v.nii.gz").string(), "--scales",
                  "1,2"});
    REQUIRE(r.code == cli::kExitOk);
    const Volume3D v = read_nifti(d / "v.nii.gz");
    CHECK(v.kind() == VolumeKind::probability);
    CHECK(v.dims() == s.dims);
    auto again = run({"enhance", "--in", (d / "img.nii.gz").string(), "--out", (d / "v2.nii.gz").string(),
                      "--scales", "1,2"});
    CHECK(r.out.substr(r.out.find("checksum")) == again.out.substr(again.out.find("checksum")));

    r = run({"patchify", "--in", (d / "img.nii.gz").string(), "--label", (d / "lab.nii.gz").string(), "--out",
             (d / "grid").string(), "--patch-size", "16", "--n", "0"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "wrote 8 patch pairs"));
    r = run({"patchify", "--in", (d / "img.nii.gz").string(), "--label", (d / "lab.nii.gz").string(), "--out",
             (d / "rand").string(), "--patch-size", "8", "--n", "5", "--seed", "4"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "wrote 5 patch pairs"));
}

TEST_CASE("phantom, train, info, predict, finetune end to end") {
    vk::test::TempDir d("cli-e2e");
    write_text(d / "phantom.cfg", kSmallPhantoms);
    auto r = run({"phantom", "--config", (d / "phantom.cfg").string(), "--n", "10", "--out", (d / "data").string(),
                  "--seed", "7"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "train 8, val 1, test 1"));
    const std::string manifest = read_text(d / "data" / "manifest.txt");

    // same seed reproduces the dataset
    r = run({"phantom", "--config", (d / "phantom.cfg").string(), "--n", "10", "--out", (d / "data2").string(),
             "--seed", "7"});
    REQUIRE(r.code == cli::kExitOk);
    for (const auto& e : load_manifest(d / "data")) {
        CHECK(read_text(e.image) == read_text(d / "data2" / e.image.filename()));
    }

    write_text(d / "train.cfg", std::string(kTinyTrain) + "data=" + (d / "data").string() + "\nout=" +
                                    (d / "run").string() + "\nseed=3\n");
    r = run({"train", "--config", (d / "train.cfg").string(), "--dry-run"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "dry-run ok (10 volumes listed)"));
    CHECK(!std::filesystem::exists(d / "run" / "best.cvau"));

    r = run({"train", "--config", (d / "train.cfg").string()});
    INFO(r.err);
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(r.out, "# seed = 3"));
    REQUIRE(std::filesystem::exists(d / "run" / "best.cvau"));
    const std::string log = read_text(d / "run" / "train_log.tsv");
    CHECK(log.rfind("stage\tepoch", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 3);

    r = run({"info", "--model", (d / "run" / "best.cvau").string()});
    REQUIRE(r.code == cli::kExitOk);
    const Checkpoint ck = load_checkpoint(d / "run" / "best.cvau");
    CHECK(contains(r.out, "parameters=" + std::to_string(count_parameters(ck.model))));
    CHECK(contains(r.out, "meta.input=raw"));
    CHECK(contains(r.out, "levels=2"));

    const auto test_entry = load_manifest(d / "data").back();
    r = run({"predict", "--model", (d / "run" / "best.cvau").string(), "--in", test_entry.image.string(), "--out",
             (d / "pred.nii.gz").string(), "--prob", (d / "prob.nii.gz").string()});
    REQUIRE(r.code == cli::kExitOk);
    const Volume3D mask = read_nifti(d / "pred.nii.gz");
    CHECK(mask.kind() == VolumeKind::binary_mask);
    CHECK(read_nifti(d / "prob.nii.gz").kind() == VolumeKind::probability);
    auto again = run({"predict", "--model", (d / "run" / "best.cvau").string(), "--in", test_entry.image.string(),
                      "--out", (d / "pred2.nii.gz").string()});
    CHECK(r.out.substr(r.out.find("checksum")) == again.out.substr(again.out.find("checksum")));

    r = run({"eval", "--pred", (d / "pred.nii.gz").string(), "--truth", test_entry.label.string()});
    CHECK(r.code == cli::kExitOk);
    CHECK(contains(r.out, "mean_dsc="));

    r = run({"finetune", "--config", (d / "train.cfg").string(), "--model", (d / "run" / "best.cvau").string(),
             "--out", (d / "ft").string(), "--epochs", "1"});
    INFO(r.err);
    REQUIRE(r.code == cli::kExitOk);
    CHECK(contains(read_text(d / "ft" / "train_log.tsv"), "finetune\t1\t"));
    CHECK(load_checkpoint(d / "ft" / "best.cvau").meta.at("stage") == "finetune");

    // a repeated seeded run reproduces the log apart from wall time
    r = run({"train", "--config", (d / "train.cfg").string(), "--out", (d / "run2").string()});
    REQUIRE(r.code == cli::kExitOk);
    auto strip_wall = [](const std::string& text) {
        std::string out;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) out += line.substr(0, line.rfind('\t')) + '\n';
        return out;
    };
    CHECK(strip_wall(read_text(d / "run2" / "train_log.tsv")) == strip_wall(log));
    CHECK(read_text(d / "run2" / "best.cvau") == read_text(d / "run" / "best.cvau"));
}

}  // TEST_SUITE
