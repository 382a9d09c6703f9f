#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "malle/train.hpp"
#include "malle/verify.hpp"

using namespace malle;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string tmp_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p.string();
}

train::TrainConfig tiny_config() {
  train::TrainConfig cfg;
  cfg.iterations = 4;
  cfg.batch = 2;
  cfg.patch = 16;
  cfg.ckpt_every = 2;
  cfg.eval_every = 2;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(train::cosine_lr(0, 100, 1e-3) == Catch::Approx(1e-3));
  CHECK(train::cosine_lr(100, 100, 1e-3) == Catch::Approx(0.0).margin(1e-18));
  CHECK(train::cosine_lr(50, 100, 1e-3) == Catch::Approx(5e-4));
  CHECK(train::cosine_lr(25, 100, 1.0) > train::cosine_lr(75, 100, 1.0));
  CHECK_THROWS_AS(train::cosine_lr(-1, 100, 1e-3), ContractError);
  CHECK_THROWS_AS(train::cosine_lr(101, 100, 1e-3), ContractError);
}

TEST_CASE("adam first step matches the closed form") {
  ParamStore st;
  st.add("p", Tensor::vec({1.0f, -2.0f}));
  st.at("p").grad = Tensor::vec({0.5f, -0.25f});
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  train::adam_step(st, lr, b1, b2, eps, 1);
  for (int j = 0; j < 2; ++j) {
    const double g = j == 0 ? 0.5 : -0.25;
    const double expect = (j == 0 ? 1.0 : -2.0) - lr * g / (std::abs(g) + eps);
    CHECK(st.at("p").value[j] == Catch::Approx(expect).margin(1e-6));
  }
}

TEST_CASE("adam rejects non-finite gradients, naming the parameter") {
  ParamStore st;
  st.add("layer.w", Tensor::vec({1.0f}));
  st.at("layer.w").grad[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH(train::adam_step(st, 1e-3, 0.9, 0.999, 1e-8, 1),
                    Catch::Matchers::ContainsSubstring("layer.w"));
}

TEST_CASE("global norm clipping") {
  ParamStore st;
  st.add("a", Tensor::vec({0.0f, 0.0f}));
  st.at("a").grad = Tensor::vec({3.0f, 4.0f});
  CHECK(train::grad_global_norm(st) == Catch::Approx(5.0));
  train::clip_grads(st, 1.0);
  CHECK(train::grad_global_norm(st) == Catch::Approx(1.0).margin(1e-6));
  CHECK(st.at("a").grad[0] == Catch::Approx(0.6f));
  // already-small gradients are untouched
  st.at("a").grad = Tensor::vec({0.1f, 0.0f});
  train::clip_grads(st, 1.0);
  CHECK(st.at("a").grad[0] == 0.1f);
}

TEST_CASE("config validation") {
  ModelGraph m = model::build_dncnn(2, 4);
  train::TrainConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate(m));
  cfg.sigmas = {0.0f};
  CHECK_THROWS_AS(cfg.validate(m), ContractError);
  cfg.sigmas = {};
  CHECK_THROWS_AS(cfg.validate(m), ContractError);
  cfg = tiny_config();
  cfg.batch = 0;
  CHECK_THROWS_AS(cfg.validate(m), ContractError);
}

TEST_CASE("evaluate is deterministic and identity models score the noisy baseline") {
  ModelGraph m = model::build_dncnn(2, 4);  // zero params: out = input
  auto val = data::synth_corpus(2, 32, 5);
  const auto a = train::evaluate(m, val, 25.0f, 7);
  const auto b = train::evaluate(m, val, 25.0f, 7);
  CHECK(a.mean_psnr == b.mean_psnr);
  CHECK(a.per_image_psnr.size() == 2);
  // the identity model returns its (noisy) input, so its PSNR equals the
  // noisy-input baseline computed over the same seeded noise
  CHECK(a.mean_psnr == Catch::Approx(train::noisy_input_psnr(val, 25.0f, 7)).margin(1e-9));
  CHECK_THROWS_AS(train::evaluate(m, {}, 25.0f, 7), ContractError);
}

TEST_CASE("training is deterministic: byte-identical CSV and checkpoint") {
  auto corpus = data::synth_corpus(3, 32, 21);
  auto val = data::synth_corpus(1, 32, 22);
  auto run = [&](const char* dir) {
    ModelGraph m = model::build_dncnn(2, 4);
    Rng rng(9);
    model::init_weights(m, rng);
    const std::string d = tmp_dir(dir);
    const auto res = train::train(m, corpus, val, tiny_config(), d);
    CHECK(res.iterations_run == 4);
    CHECK(res.final_psnr > 0.0);
    return d;
  };
  const std::string d1 = run("malle_train_a");
  const std::string d2 = run("malle_train_b");
  CHECK(read_bytes(d1 + "/loss.csv") == read_bytes(d2 + "/loss.csv"));
  CHECK(read_bytes(d1 + "/last.mckp") == read_bytes(d2 + "/last.mckp"));
  CHECK(read_bytes(d1 + "/init.mckp") == read_bytes(d2 + "/init.mckp"));

  // the CSV has a header plus one line per iteration
  std::istringstream csv(read_bytes(d1 + "/loss.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "iter,loss,lr,psnr");
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 4);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("resume from a mid-run state is bit-exact") {
  auto corpus = data::synth_corpus(3, 32, 21);
  auto val = data::synth_corpus(1, 32, 22);
  const train::TrainConfig cfg = tiny_config();

  ModelGraph full = model::build_dncnn(2, 4);
  Rng rng(9);
  model::init_weights(full, rng);
  const std::string d_full = tmp_dir("malle_train_full");
  train::train(full, corpus, val, cfg, d_full);

  // restart from the iteration-2 snapshot and run the remaining iterations
  ModelGraph res = model::load_model(d_full + "/ckpt_2.mckp");
  const std::string d_res = tmp_dir("malle_train_resume");
  train::train(res, corpus, val, cfg, d_res, d_full + "/state_2.mckp");

  CHECK(read_bytes(d_full + "/last.mckp") == read_bytes(d_res + "/last.mckp"));
  CHECK(read_bytes(d_full + "/state.mckp") == read_bytes(d_res + "/state.mckp"));
  fs::remove_all(d_full);
  fs::remove_all(d_res);
}

TEST_CASE("a short run on a tiny model reduces the loss") {
  auto corpus = data::synth_corpus(3, 32, 31);
  ModelGraph m = model::build_dncnn(2, 8);
  Rng rng(13);
  model::init_weights(m, rng);
  train::TrainConfig cfg = tiny_config();
  cfg.iterations = 30;
  cfg.batch = 4;
  cfg.eval_every = 0;
  cfg.ckpt_every = 0;
  const std::string d = tmp_dir("malle_train_loss");
  train::train(m, corpus, {}, cfg, d);

  // average the first and last five logged losses
  std::istringstream csv(read_bytes(d + "/loss.csv"));
  std::string line;
  std::getline(csv, line);
  std::vector<double> losses;
  while (std::getline(csv, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    losses.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  REQUIRE(losses.size() == 30);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += losses[size_t(i)];
    tail += losses[losses.size() - 5 + size_t(i)];
  }
  INFO("head=" << head / 5 << " tail=" << tail / 5);
  CHECK(tail < head);
  fs::remove_all(d);
}
