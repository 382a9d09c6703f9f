#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "malle/model.hpp"
#include "malle/verify.hpp"

using namespace malle;

TEST_CASE("dncnn builder layer structure") {
  ModelGraph plain = model::build_dncnn(3, 16);
  // conv relu conv relu conv
  REQUIRE(plain.layers.size() == 5);
  CHECK(plain.layers[0].kind == LayerKind::Conv);
  CHECK(plain.layers[2].kind == LayerKind::Conv);
  CHECK(plain.layers[4].kind == LayerKind::Conv);
  CHECK(plain.layers[4].conv.c_out == 3);
  CHECK(plain.divisor == 1);

  ModelGraph malle = model::build_dncnn(3, 16, 1);
  REQUIRE(malle.layers.size() == 5);
  CHECK(malle.layers[2].kind == LayerKind::MalleConv);  // conv index 2 of 3
  CHECK(malle.layers[2].pred.k == 1);
  CHECK(malle.divisor == 8);

  ModelGraph deep = model::build_dncnn(5, 8, 3);
  // convs at 1..5, malle replaces index ceil(5/2) = 3
  int malle_count = 0, malle_at = -1;
  for (size_t i = 0; i < deep.layers.size(); ++i)
    if (deep.layers[i].kind == LayerKind::MalleConv) {
      ++malle_count;
      malle_at = int(i);
    }
  CHECK(malle_count == 1);
  CHECK(malle_at == 4);  // conv,relu,conv,relu,malle,...

  CHECK_THROWS_AS(model::build_dncnn(1, 8), ShapeError);
}

TEST_CASE("shape propagation accepts valid graphs and rejects bad sources") {
  ModelGraph m = model::build_dncnn(3, 16, 1);
  const Shape out = model::check_shapes(m, Shape{1, 32, 32, 3});
  CHECK(out == Shape{1, 32, 32, 3});
  CHECK_THROWS_AS(model::check_shapes(m, Shape{1, 32, 32, 4}), ShapeError);
  CHECK_THROWS_AS(model::check_shapes(m, Shape{1, 20, 32, 3}), ShapeError);  // not /8

  // a forward reference must be rejected
  ModelGraph bad;
  LayerSpec add;
  add.kind = LayerKind::Add;
  add.name = "add";
  add.src = 0;  // refers to itself
  bad.layers.push_back(add);
  CHECK_THROWS_AS(model::check_shapes(bad, Shape{1, 4, 4, 3}), ShapeError);
}

TEST_CASE("zero-initialized models are the identity (residual head)") {
  Rng rng(31);
  Tensor x = verify::random_tensor(Shape{1, 20, 28, 3}, rng);

  ModelGraph dn = model::build_dncnn(3, 8, 1);  // divisor 8, 20x28 needs padding
  CHECK(max_abs_diff(model::infer(dn, x), x) == 0.0);

  ModelGraph mn = model::build_mallenet(4, 1, 1, 2);  // divisor 16
  Tensor y = verify::random_tensor(Shape{1, 24, 20, 3}, rng);
  CHECK(max_abs_diff(model::infer(mn, y), y) == 0.0);
}

TEST_CASE("initialized MalleConv starts as an identity operator") {
  ModelGraph m = model::build_dncnn(3, 8, 3);
  Rng rng(5);
  model::init_weights(m, rng);
  Tensor x = verify::random_tensor(Shape{1, 16, 16, 3}, rng, 0.5f);
  const model::MalleCapture cap = model::capture_first_malle(m, x);
  CHECK(cap.layer == 2);
  CHECK(cap.grid.k == 3);
  CHECK(cap.input.shape().c == 8);
  // exit weights start at zero with a delta-kernel bias, so every grid cell
  // is the delta kernel and the fused output equals its input
  CHECK(max_abs_diff(cap.fused, cap.input) < 1e-5);
  auto [w, b] = cap.grid.cell_kernel(0, 0);
  CHECK(w.at(0, 1, 1, 0) == 1.0f);
  CHECK(w.at(0, 0, 0, 0) == 0.0f);
  CHECK(b[0] == 0.0f);
}

TEST_CASE("capture_first_malle throws when there is no MalleConv") {
  ModelGraph m = model::build_dncnn(3, 8);
  CHECK_THROWS_AS(model::capture_first_malle(m, Tensor(Shape{1, 8, 8, 3})), ContractError);
}

TEST_CASE("mallenet builder shape-checks across sizes") {
  ModelGraph m = model::build_mallenet(8, 2, 3, 3);
  CHECK(m.divisor == 32);
  CHECK(model::check_shapes(m, Shape{1, 64, 64, 3}) == Shape{1, 64, 64, 3});
  CHECK(model::check_shapes(m, Shape{2, 32, 96, 3}) == Shape{2, 32, 96, 3});
  int malles = 0;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::MalleConv) ++malles;
  CHECK(malles == 3);  // one per level
  CHECK_THROWS_AS(model::build_mallenet(2, 1, 1), ShapeError);
}

TEST_CASE("model save/load round-trip reproduces inference bit-exactly") {
  ModelGraph m = model::build_dncnn(3, 8, 1);
  Rng rng(77);
  model::init_weights(m, rng);
  Tensor x = verify::random_tensor(Shape{1, 16, 16, 3}, rng, 0.5f);
  const Tensor before = model::infer(m, x);

  const std::string path =
      (std::filesystem::temp_directory_path() / "malle_model_test.mckp").string();
  model::save_model(m, path);
  ModelGraph loaded = model::load_model(path);
  std::filesystem::remove(path);

  REQUIRE(loaded.layers.size() == m.layers.size());
  CHECK(model::param_count(loaded) == model::param_count(m));
  const Tensor after = model::infer(loaded, x);
  REQUIRE(before.size() == after.size());
  for (std::int64_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);
}

TEST_CASE("build_from_config rejects unknown or incomplete configs") {
  CHECK_THROWS_AS(model::build_from_config("arch=resnet\n"), IoError);
  CHECK_THROWS_AS(model::build_from_config("arch=dncnn\ndepth=3\n"), IoError);
  ModelGraph m = model::build_from_config("arch=dncnn\ndepth=3\nchannels=8\nmalle_mid_k=0\nin_channels=3\n");
  CHECK(m.layers.size() == 5);
}

TEST_CASE("init_weights is deterministic given the seed") {
  auto build = [] {
    ModelGraph m = model::build_mallenet(4, 1, 1, 2);
    Rng rng(123);
    model::init_weights(m, rng);
    return m;
  };
  ModelGraph a = build(), b = build();
  REQUIRE(a.params.count() == b.params.count());
  for (int i = 0; i < a.params.count(); ++i)
    for (std::int64_t j = 0; j < a.params.at(i).value.size(); ++j)
      REQUIRE(a.params.at(i).value[j] == b.params.at(i).value[j]);
}
