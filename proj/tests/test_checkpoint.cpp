#include <filesystem>
#include <set>

#include "doctest.h"
#include "sskd/binary_io.hpp"
#include "sskd/checkpoint.hpp"
#include "sskd/errors.hpp"
#include "sskd/train.hpp"

using namespace sskd;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_h = c.input_w = 8;
  c.num_classes = 3;
  c.stage_widths = {4, 6};
  c.blocks_per_stage = {1, 2};
  return c;
}

void restamp_crc(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

std::uint64_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const ParseError& e) {
    return e.offset();
  }
  FAIL("corrupted checkpoint accepted");
  return 0;
}

// Tensor names in the parameter section, read independently of the decoder.
std::vector<std::string> parameter_names(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.raw(6 + 32, "header");
  const std::uint32_t config_len = r.u32();
  r.raw(config_len, "config");
  const std::uint32_t count = r.u32();
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    names.emplace_back(r.raw(r.u16(), "name"));
    const int rank = r.u8();
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) n *= r.u32();
    r.raw(n * 4, "payload");
  }
  return names;
}

}  // namespace

TEST_CASE("save, load, save is byte-identical and preserves outputs") {
  ModelF model = build_model<float>(tiny_config(), 7);
  model.set_input_normalization({0.1, 0.2, 0.3}, {0.5, 0.6, 0.7});
  const auto bytes = encode_checkpoint(model);
  ModelF loaded = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(loaded) == bytes);
  CHECK(loaded.config() == model.config());
  CHECK(parameter_hashes(loaded) == parameter_hashes(model));

  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 2;
  spec.resolution = 8;
  const auto d = gen_synthetic(spec).train;
  const TensorF a = predict_logits(model, d.images);
  const TensorF b = predict_logits(loaded, d.images);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));

  const auto no_stats = encode_checkpoint(model, false);
  CHECK(no_stats.size() < bytes.size());
  CHECK(encode_checkpoint(decode_checkpoint(no_stats), false) == no_stats);

  const auto path = std::filesystem::temp_directory_path() / "sskd_test_roundtrip.ckpt";
  save_checkpoint(model, path);
  CHECK(read_file(path) == bytes);
  CHECK(encode_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("corrupted checkpoints are rejected with located errors") {
  const auto bytes = encode_checkpoint(build_model<float>(tiny_config(), 7));

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(offset_of(magic) == 0);

  auto version = bytes;
  version[4] = 7;
  CHECK(offset_of(version) == 4);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK(offset_of(flipped) == bytes.size() - 4);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK(offset_of(truncated) == truncated.size() - 4);

  // A consistent CRC over an edited config text trips the digest check.
  auto digest = bytes;
  const std::size_t config_text = 6 + 32 + 4;
  digest[config_text + 2] ^= 0x01;
  restamp_crc(digest);
  CHECK(offset_of(digest) == 6);

  auto tiny = bytes;
  tiny.resize(8);
  CHECK_THROWS_AS(decode_checkpoint(tiny), ParseError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), UsageError);
}

TEST_CASE("checkpoints of a distilled student carry no adapter tensors") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 4;
  spec.resolution = 8;
  const auto data = gen_synthetic(spec);
  ModelConfig tc = tiny_config();
  tc.stage_widths = {8, 12};
  ModelF teacher = build_model<float>(tc, 1);
  PlanSettings s;
  s.batch_size = 6;
  s.stage_epochs = 1;
  s.head_epochs = 1;
  s.stage_policy.kind = s.head_policy.kind = PolicyKind::kMilestone;
  s.stage_policy.initial_lr = 1e-3;
  TrainData td{&data.train, nullptr, {}, {}};
  TrainResult r = train_sskd(teacher, tiny_config(), td, make_plan(Method::kSskd, 2, s, 1));

  const auto bytes = encode_checkpoint(r.student);
  const auto names = parameter_names(bytes);
  std::set<std::string> expected;
  for (auto* p : r.student.parameters()) expected.insert(p->name);
  CHECK(std::set<std::string>(names.begin(), names.end()) == expected);
  CHECK(names.size() == expected.size());
  for (const auto& n : names) CHECK(n.find("adapter") == std::string::npos);
}
