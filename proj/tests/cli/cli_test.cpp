#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "fodforge/checkpoint.hpp"
#include "fodforge/volume.hpp"

namespace fs = std::filesystem;

namespace fodforge {
namespace {

const char* kTinySpec = R"({"dims":[8,8,2],"regions":[
 {"name":"single","geometry":"single","box":[0,4,0,8,0,2],"fractions":{"wm":0.9,"gm":0.1}},
 {"name":"crossing2","geometry":"crossing2","box":[4,8,0,4,0,2],"fractions":{"wm":0.9,"gm":0.1}},
 {"name":"grey","geometry":"gm","box":[4,8,4,8,0,2],"fractions":{"gm":0.9,"csf":0.1}}],
 "scheme":{"directions_per_shell":30,"b0":6},"seed":3})";

const char* kTinyJob = R"({"cascade":{"patch":5,"cascades":2,"schedule":[8,8],"pre_output":8},
 "train":{"batch":4,"warmup":4,"eval_every":2,"patience":2,"max_stage_iterations":4,"max_stage2_iterations":4,"validation_voxels":12},
 "classifier":{"samples":200,"noise_copies":0,"epochs":2,"batch":20}})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fodforge_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write("tiny.json", kTinySpec);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { detail::write_file(path(name), text); }
  std::string read(const std::string& name) const { return detail::read_file(path(name)); }

  /// Runs the tool in the test directory; stderr goes to `err_`.
  int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" FODFORGE_CLI "' " + args + " >stdout.txt 2>stderr.txt";
    const int status = std::system(cmd.c_str());
    err_ = read("stderr.txt");
    out_ = read("stdout.txt");
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  void phantom(const std::string& out, int seed) {
    ASSERT_EQ(run("phantom --spec tiny.json --out " + out + " --seed " + std::to_string(seed)), 0) << err_;
  }

  fs::path dir_;
  std::string err_, out_;
};

TEST_F(Cli, PhantomWritesSixVolumesAndIsReproducible) {
  ASSERT_EQ(run("phantom --spec tiny.json --out a"), 0) << err_;
  int volumes = 0;
  for (const auto& e : fs::directory_iterator(path("a"))) volumes += e.path().extension() == ".fodv";
  EXPECT_EQ(volumes, 6);
  for (const char* name : {"fod", "wm_mask", "gm_mask", "counts", "dwi_clean", "dwi"})
    EXPECT_TRUE(fs::exists(path(std::string("a/") + name + ".fodv"))) << name;
  ASSERT_EQ(run("phantom --spec tiny.json --out b --threads 1"), 0) << err_;
  for (const auto& e : fs::directory_iterator(path("a")))
    EXPECT_EQ(read("a/" + e.path().filename().string()), read("b/" + e.path().filename().string())) << e.path();
  ASSERT_EQ(run("phantom --spec tiny.json --out c --seed 4"), 0) << err_;
  EXPECT_NE(read("a/dwi.fodv"), read("c/dwi.fodv"));
}

TEST_F(Cli, DefaultPhantomSpec) {
  ASSERT_EQ(run("phantom --out d"), 0) << err_;
  const Volume fod = read_volume(path("d/fod.fodv"));
  EXPECT_EQ(fod.spatial(), (Dims3{32, 32, 8}));
  EXPECT_EQ(fod.channels(), 47);
}

TEST_F(Cli, MalformedJsonExitsTwoWithPosition) {
  write("bad.json", "{\"dims\":[8,8,2],\n  \"regions\": [,]}");
  EXPECT_EQ(run("phantom --spec bad.json --out x"), 2);
  EXPECT_NE(err_.find("line 2, column 15"), std::string::npos) << err_;
  write("overlap.json",
        R"({"dims":[4,4,1],"regions":[{"name":"a","geometry":"single","box":[0,3,0,4,0,1],"fractions":{"wm":1}},
            {"name":"b","geometry":"single","box":[2,4,0,4,0,1],"fractions":{"wm":1}}]})");
  EXPECT_EQ(run("phantom --spec overlap.json --out x"), 2);
  EXPECT_NE(err_.find("overlaps"), std::string::npos) << err_;
}

TEST_F(Cli, IoAndUsageErrors) {
  EXPECT_EQ(run("phantom --spec missing.json --out x"), 3);
  EXPECT_EQ(run("segment --fod missing.fodv --out fx"), 3);
  EXPECT_EQ(run("phantom --bogus"), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("fit-csd --dwi a --response a,b --out x"), 3);
  EXPECT_EQ(run("phantom --spec tiny.json --out x", "FODFORGE_THREADS=zero"), 2);
}

TEST_F(Cli, EvaluateIdentityAndShapeMismatch) {
  phantom("p", 3);
  ASSERT_EQ(run("evaluate --pred p/fod.fodv --truth p/fod.fodv --mask p/wm_mask.fodv --roi p/counts.fodv --report r.json --table"),
            0)
      << err_;
  const auto report = nlohmann::json::parse(read("r.json"));
  for (const auto& [name, m] : report.at("rois").items()) {
    EXPECT_EQ(m.at("sse").at("mean").get<double>(), 0.0) << name;
    EXPECT_EQ(m.at("acc_percent").at("mean").get<double>(), 100.0) << name;
    EXPECT_EQ(m.at("fixel_accuracy").at("mean").get<double>(), 1.0) << name;
    EXPECT_EQ(m.at("pae").at("mean").get<double>(), 0.0) << name;
    EXPECT_EQ(m.at("afde").at("mean").get<double>(), 0.0) << name;
  }
  EXPECT_NE(out_.find("roi_2"), std::string::npos) << out_;
  write("small.json", R"({"dims":[4,4,2],"regions":[{"name":"a","geometry":"single","box":[0,4,0,4,0,2],"fractions":{"wm":1}}]})");
  ASSERT_EQ(run("phantom --spec small.json --out q"), 0) << err_;
  EXPECT_EQ(run("evaluate --pred q/fod.fodv --truth p/fod.fodv --mask p/wm_mask.fodv --report r.json"), 2);
  EXPECT_NE(err_.find("[4,4,2,47]"), std::string::npos) << err_;
  EXPECT_NE(err_.find("[8,8,2,47]"), std::string::npos) << err_;
  EXPECT_EQ(run("evaluate --pred p/dwi.fodv --truth p/fod.fodv --mask p/wm_mask.fodv --report r.json"), 2);
}

TEST_F(Cli, FitCsdIsThreadIndependent) {
  phantom("p", 3);
  const std::string base =
      "fit-csd --dwi p/dwi.fodv --scheme p/dwi.bvec,p/dwi.bval --response "
      "p/response_wm.txt,p/response_gm.txt,p/response_csf.txt --mask p/wm_mask.fodv";
  ASSERT_EQ(run(base + " --out one.fodv --threads 1"), 0) << err_;
  ASSERT_EQ(run(base + " --out two.fodv", "FODFORGE_THREADS=2"), 0) << err_;
  EXPECT_EQ(read("one.fodv"), read("two.fodv"));
  ASSERT_EQ(run("fit-csd --dwi p/dwi.fodv --response p/response_wm.txt,p/response_gm.txt,p/response_csf.txt --out hdr.fodv"), 0)
      << err_;
  EXPECT_EQ(read_volume(path("hdr.fodv")).kind, VolumeKind::Fod);
  EXPECT_EQ(run(base + " --out bad.fodv --response p/response_wm.txt"), 2);
}

TEST_F(Cli, TrainAndReconstructAreSeedDeterministic) {
  for (int s = 1; s <= 3; ++s) phantom("data/p" + std::to_string(s), s);
  write("job.json", kTinyJob);
  ASSERT_EQ(run("--threads 1 train --data data --config job.json --out a.ckpt --seed 7"), 0) << err_;
  ASSERT_EQ(run("--threads 1 train --data data --config job.json --out b.ckpt --seed 7"), 0) << err_;
  EXPECT_EQ(read("a.ckpt"), read("b.ckpt"));
  EXPECT_EQ(read("a.ckpt.stage1"), read("b.ckpt.stage1"));
  EXPECT_EQ(read("a.ckpt.log.jsonl"), read("b.ckpt.log.jsonl"));
  ASSERT_EQ(run("--threads 1 train --data data --config job.json --out c.ckpt --seed 8"), 0) << err_;
  EXPECT_NE(read("a.ckpt"), read("c.ckpt"));

  // Checkpoints survive a load/save cycle byte for byte.
  EXPECT_EQ(encode_checkpoint(read_checkpoint(path("a.ckpt"))), read("a.ckpt"));

  // The full 96-volume DWI is matched to the 30-volume checkpoint scheme.
  const std::string rec = "reconstruct --dwi data/p1/dwi.fodv --checkpoint a.ckpt --mask data/p1/wm_mask.fodv";
  ASSERT_EQ(run(rec + " --out r1.fodv"), 0) << err_;
  ASSERT_EQ(run(rec + " --out r2.fodv"), 0) << err_;
  EXPECT_EQ(read("r1.fodv"), read("r2.fodv"));
  const Volume r1 = read_volume(path("r1.fodv"));
  EXPECT_EQ(r1.kind, VolumeKind::Fod);
  EXPECT_EQ(r1.channels(), 47);
  ASSERT_EQ(run(rec + " --out nodc.fodv --no-dc"), 0) << err_;
  EXPECT_NE(read("r1.fodv"), read("nodc.fodv"));

  write("other.json", R"({"dims":[8,8,2],"regions":[{"name":"a","geometry":"single","box":[0,8,0,8,0,2],"fractions":{"wm":1}}],
                          "scheme":{"shells":[1000,2500],"directions_per_shell":30,"b0":6}})");
  ASSERT_EQ(run("phantom --spec other.json --out o"), 0) << err_;
  EXPECT_EQ(run("reconstruct --dwi o/dwi.fodv --checkpoint a.ckpt --out x.fodv"), 2);
  EXPECT_NE(err_.find("no volume matching"), std::string::npos) << err_;
  EXPECT_EQ(run("reconstruct --dwi data/p1/fod.fodv --checkpoint a.ckpt --out x.fodv"), 2);
  EXPECT_EQ(run("reconstruct --dwi data/p1/dwi.fodv --checkpoint a.ckpt.log.jsonl --out x.fodv"), 2);
}

TEST_F(Cli, SegmentWritesFixelDirectory) {
  phantom("p", 3);
  ASSERT_EQ(run("segment --fod p/fod.fodv --mask p/wm_mask.fodv --out fx"), 0) << err_;
  const Volume counts = read_volume(path("fx/counts.fodv"));
  const Volume truth = read_volume(path("p/counts.fodv"));
  const Volume wm = read_volume(path("p/wm_mask.fodv"));
  for (int v = 0; v < counts.voxel_count(); ++v)
    if (wm.value(v, 0) >= 0.5f) EXPECT_EQ(counts.value(v, 0), truth.value(v, 0)) << v;
}

TEST_F(Cli, ConvertDocumentsMapping) {
  ASSERT_EQ(run("convert"), 0);
  EXPECT_NE(out_.find("NIfTI"), std::string::npos);
}

}  // namespace
}  // namespace fodforge
