#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "malle/config.hpp"

using namespace malle;

namespace {
std::string write_tmp(const char* name, const std::string& text) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream os(path);
  os << text;
  return path;
}
}  // namespace

TEST_CASE("defaults are present and typed") {
  RunConfig cfg;
  CHECK(cfg.gets("model.arch") == "dncnn");
  CHECK(cfg.geti("train.iterations") == 2000);
  CHECK(cfg.getf("train.lr") == Catch::Approx(1e-3));
  CHECK(cfg.getb("train.blind") == false);
  CHECK(cfg.get_floats("train.sigma") == std::vector<float>{25.0f});
  CHECK(cfg.geti("bench.h") == 256);
}

TEST_CASE("set and load_file override defaults") {
  RunConfig cfg;
  cfg.set("train.lr", "0.01");
  CHECK(cfg.getf("train.lr") == Catch::Approx(0.01));

  const std::string path = write_tmp("malle_cfg_ok.cfg",
                                     "# comment line\n"
                                     "model.arch = mallenet\n"
                                     "train.sigma = 15,25,50  # inline comment\n"
                                     "\n"
                                     "train.blind=true\n");
  cfg.load_file(path);
  std::filesystem::remove(path);
  CHECK(cfg.gets("model.arch") == "mallenet");
  CHECK(cfg.getb("train.blind") == true);
  CHECK(cfg.get_floats("train.sigma") == std::vector<float>{15.0f, 25.0f, 50.0f});
}

TEST_CASE("unknown keys and malformed values are rejected") {
  RunConfig cfg;
  CHECK_THROWS_AS(cfg.set("model.nope", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.lr", "fast"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.blind", "yes"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.sigma", ""), ConfigError);
  CHECK_THROWS_AS(cfg.geti("model.arch"), ConfigError);  // type mismatch on read
  CHECK_THROWS_AS(cfg.load_file("/nonexistent/x.cfg"), ConfigError);

  const std::string path = write_tmp("malle_cfg_bad.cfg", "train.lr\n");
  CHECK_THROWS_WITH(cfg.load_file(path), Catch::Matchers::ContainsSubstring("key=value"));
  std::filesystem::remove(path);
}

TEST_CASE("effective text is canonical and reloadable") {
  RunConfig cfg;
  cfg.set("train.iterations", "7");
  const std::string text = cfg.effective();
  CHECK(text.find("train.iterations=7\n") != std::string::npos);
  CHECK(text.find("model.arch=dncnn\n") != std::string::npos);

  // feeding the effective text back yields the same effective text
  const std::string path = write_tmp("malle_cfg_rt.cfg", text);
  RunConfig cfg2;
  cfg2.load_file(path);
  std::filesystem::remove(path);
  CHECK(cfg2.effective() == text);
}
