#include <random>

#include "doctest.h"
#include "sskd/errors.hpp"
#include "sskd/model.hpp"
#include "sskd/ops.hpp"
#include "support/gradcheck.hpp"

using namespace sskd;
using sskd::testing::random_tensor;

namespace {

ModelConfig tiny_config(Family family = Family::kResidualCnn) {
  ModelConfig c;
  c.family = family;
  c.input_h = c.input_w = 16;
  c.input_channels = 2;
  c.num_classes = 3;
  c.stage_widths = {3, 4, 5, 6};
  c.blocks_per_stage = {2, 1, 2, 1};
  return c;
}

template <typename T>
std::vector<T> flatten_parameters(const StagedModel<T>& m) {
  std::vector<T> out;
  for (auto* p : m.parameters()) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

}  // namespace

TEST_CASE("desk configuration yields stage resolutions 32, 16, 8, 4") {
  auto m = build_model<double>(desk_student_config(), 1);
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 32, 32}, rng);
  auto f = m.forward_stages(x, 4);
  const int expected[] = {32, 16, 8, 4};
  for (int i = 0; i < 4; ++i) {
    CHECK(f.features[i].dim(2) == expected[i]);
    CHECK(f.features[i].dim(3) == expected[i]);
  }
  CHECK(f.features[0].dim(1) == 8);
  CHECK(f.features[3].dim(1) == 64);
}

TEST_CASE("224 reference input yields stage resolutions 56, 28, 14, 7") {
  ModelConfig c = desk_student_config(224);
  c.stem_pool = 4;
  c.stage_widths = {2, 2, 2, 2};
  const auto res = c.stage_resolutions();
  REQUIRE(res.size() == 4);
  CHECK(res[0].first == 56);
  CHECK(res[1].first == 28);
  CHECK(res[2].first == 14);
  CHECK(res[3].first == 7);
  auto m = build_model<float>(c, 2);
  auto f = m.forward_stages(TensorF({1, 3, 224, 224}, 0.5f), 4);
  CHECK(f.features[0].shape() == Shape{1, 2, 56, 56});
  CHECK(f.features[3].shape() == Shape{1, 2, 7, 7});
}

TEST_CASE("inconsistent widths and blocks are rejected") {
  ModelConfig c = tiny_config();
  c.blocks_per_stage = {1, 1};
  CHECK_THROWS_AS(build_model<float>(c, 1), ConfigError);
  c = tiny_config();
  c.input_h = 18;
  CHECK_THROWS_AS(build_model<float>(c, 1), ConfigError);
}

TEST_CASE("same config and seed give bit-identical parameters") {
  auto a = build_model<float>(desk_teacher_config(), 7);
  auto b = build_model<float>(desk_teacher_config(), 7);
  auto c = build_model<float>(desk_teacher_config(), 8);
  CHECK(flatten_parameters(a) == flatten_parameters(b));
  CHECK(flatten_parameters(a) != flatten_parameters(c));
}

TEST_CASE("stage composition matches the full forward pass") {
  for (Family family : {Family::kResidualCnn, Family::kPlainCnn}) {
    auto m = build_model<double>(tiny_config(family), 3);
    std::mt19937_64 rng(5);
    auto x = random_tensor({2, 2, 16, 16}, rng);
    auto full = m.forward_full(x);
    CHECK(full.shape() == Shape{2, 3});

    auto two = m.forward_stages(x, 2);
    TensorD h = two.features.back();
    for (int s = 3; s <= m.num_stages(); ++s) h = m.forward_stage(s, h);
    auto all = m.forward_stages(x, m.num_stages());
    CHECK(std::equal(h.values().begin(), h.values().end(), all.features.back().values().begin()));

    auto logits = m.forward_head(all.features.back());
    CHECK(std::equal(logits.values().begin(), logits.values().end(), full.values().begin()));
  }
}

TEST_CASE("forward_stages range and input shape are checked") {
  auto m = build_model<float>(tiny_config(), 1);
  TensorF x({1, 2, 16, 16}, 0.1f);
  CHECK(m.forward_stages(x, 1).features.size() == 1);
  CHECK_THROWS_AS(m.forward_stages(x, 0), UsageError);
  CHECK_THROWS_AS(m.forward_stages(x, 5), UsageError);
  CHECK_THROWS_AS(m.forward_full(TensorF({1, 3, 16, 16}, 0.f)), DimensionError);
}

TEST_CASE("zeroed head weights give logits equal to the bias") {
  auto m = build_model<double>(tiny_config(), 4);
  auto head = m.parameters_of(kHeadOwner);
  REQUIRE(head.size() == 2);
  for (auto& v : head[0]->value.values()) v = 0.0;
  const std::vector<double> bias{0.25, -1.5, 3.0};
  std::copy(bias.begin(), bias.end(), head[1]->value.values().begin());
  std::mt19937_64 rng(9);
  auto logits = m.forward_full(random_tensor({4, 2, 16, 16}, rng));
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 3; ++c) CHECK(logits.values()[i * 3 + c] == bias[c]);
  }
}

TEST_CASE("repartition keeps the computation and shares parameters") {
  auto m = build_model<double>(tiny_config(), 11);
  std::mt19937_64 rng(12);
  auto x = random_tensor({2, 2, 16, 16}, rng);
  auto before = m.forward_full(x);
  for (int n : {1, 2, 3, 4, 5}) {
    auto r = m.repartition(n);
    CHECK(r.num_stages() == n);
    auto after = r.forward_full(x);
    CHECK(std::equal(after.values().begin(), after.values().end(), before.values().begin()));
    CHECK(r.parameters().size() == m.parameters().size());
  }
  auto same = m.repartition(4);
  for (int s = 1; s <= 4; ++s) {
    CHECK(same.stage_begin(s) == m.stage_begin(s));
    CHECK(same.stage_end(s) == m.stage_end(s));
  }
  auto one = m.repartition(1);
  auto f = one.forward_stages(x, 1).features.back();
  auto native = m.forward_backbone(x);
  CHECK(std::equal(f.values().begin(), f.values().end(), native.values().begin()));

  // Shared parameters: an edit through the view is visible in the original.
  one.parameters()[0]->value.values()[0] += 1.0;
  CHECK(m.parameters()[0]->value.values()[0] == one.parameters()[0]->value.values()[0]);
}

TEST_CASE("repartition merges leading stages and splits at block granularity") {
  const std::vector<std::size_t> native{0, 3, 4, 6, 7};
  CHECK(repartition_bounds(native, 2) == std::vector<std::size_t>{0, 6, 7});
  CHECK(repartition_bounds(native, 3) == std::vector<std::size_t>{0, 4, 6, 7});
  CHECK(repartition_bounds(native, 5) == std::vector<std::size_t>{0, 2, 3, 4, 6, 7});
  CHECK_THROWS_AS(repartition_bounds(native, 6), ConfigError);
  CHECK_THROWS_AS(repartition_bounds(native, 0), ConfigError);
  CHECK_THROWS_AS(build_model<float>(desk_student_config(), 1).repartition(6), ConfigError);
}

TEST_CASE("every parameter has exactly one owner") {
  auto m = build_model<float>(tiny_config(), 1);
  for (int n : {1, 2, 4, 5}) {
    auto r = m.repartition(n);
    std::size_t owned = 0;
    for (OwnerId o : r.owners()) owned += r.parameters_of(o).size();
    CHECK(owned == r.parameters().size());
    std::set<std::string> names;
    for (OwnerId o : r.owners()) {
      for (auto* p : r.parameters_of(o)) {
        CHECK(names.insert(p->name).second);
        CHECK(r.owner_of(p->name) == o);
      }
    }
  }
  CHECK(m.owner_of("head.fc.weight") == kHeadOwner);
  CHECK(m.owner_of("stem.conv.weight") == 1);
}

TEST_CASE("clone is deep and reinit_head only touches the head") {
  auto m = build_model<float>(tiny_config(), 1);
  auto c = m.clone();
  CHECK(flatten_parameters(m) == flatten_parameters(c));
  c.parameters()[0]->value.values()[0] += 1.0f;
  CHECK(flatten_parameters(m) != flatten_parameters(c));

  auto before = m.clone();
  m.reinit_head(99);
  for (OwnerId o : m.owners()) {
    auto a = m.parameters_of(o);
    auto b = before.parameters_of(o);
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
      same = same && std::equal(a[i]->value.values().begin(), a[i]->value.values().end(), b[i]->value.values().begin());
    }
    CHECK(same == (o != kHeadOwner));
  }
}
