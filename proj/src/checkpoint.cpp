#include "sskd/checkpoint.hpp"

#include <openssl/evp.h>

#include <map>

#include "json.hpp"
#include "sskd/binary_io.hpp"
#include "sskd/errors.hpp"

namespace sskd {

namespace {

constexpr char kMagic[] = "SSKD";
constexpr std::uint16_t kVersion = 1;

template <typename Named>
void write_records(ByteWriter& w, const std::vector<Named*>& items) {
  w.u32(static_cast<std::uint32_t>(items.size()));
  for (const Named* item : items) {
    if (item->name.size() > 0xFFFF) throw ValidationError("tensor name too long: " + item->name);
    w.u16(static_cast<std::uint16_t>(item->name.size()));
    w.raw(item->name);
    const Shape& shape = item->value.shape();
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : item->value.values()) w.f32(v);
  }
}

struct Record {
  Shape shape;
  std::vector<float> values;
  std::size_t offset;
};

std::map<std::string, Record> read_records(ByteReader& r) {
  std::map<std::string, Record> out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint16_t name_len = r.u16();
    std::string name(r.raw(name_len, "tensor name"));
    const std::uint8_t rank = r.u8();
    Shape shape;
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t extent = r.u32();
      if (extent == 0 || extent > (1u << 30)) {
        throw ParseError(r.offset() - 4, "tensor '" + name + "' has invalid extent " + std::to_string(extent));
      }
      shape.push_back(static_cast<int>(extent));
      n *= extent;
    }
    r.require(n * 4, "tensor payload");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    if (!out.emplace(name, Record{shape, std::move(values), at}).second) {
      throw ParseError(at, "duplicate tensor '" + name + "'");
    }
  }
  return out;
}

template <typename Named>
void assign_records(std::map<std::string, Record>& records, const std::vector<Named*>& items, std::size_t section) {
  for (Named* item : items) {
    auto it = records.find(item->name);
    if (it == records.end()) throw ParseError(section, "checkpoint is missing tensor '" + item->name + "'");
    if (it->second.shape != item->value.shape()) {
      throw ParseError(it->second.offset, "tensor '" + item->name + "' has shape " + to_string(it->second.shape) +
                                              ", model expects " + to_string(item->value.shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), item->value.values().begin());
    records.erase(it);
  }
  if (!records.empty()) {
    throw ParseError(records.begin()->second.offset, "unexpected tensor '" + records.begin()->first + "'");
  }
}

}  // namespace

std::string canonical_config_text(const ModelConfig& c) {
  nlohmann::json j;
  j["family"] = to_string(c.family);
  j["input_h"] = c.input_h;
  j["input_w"] = c.input_w;
  j["input_channels"] = c.input_channels;
  j["num_classes"] = c.num_classes;
  j["stage_widths"] = c.stage_widths;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["stem_pool"] = c.stem_pool;
  return j.dump();
}

ModelConfig parse_config_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.family = parse_family(j.at("family").get<std::string>());
    c.input_h = j.at("input_h").get<int>();
    c.input_w = j.at("input_w").get<int>();
    c.input_channels = j.at("input_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
    c.stem_pool = j.at("stem_pool").get<int>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config text: ") + e.what());
  }
}

std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> bytes) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32) {
    throw StateError("SHA-256 computation failed");
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const StagedModel<float>& model, bool with_stats) {
  const std::string config = canonical_config_text(model.config());
  const auto config_bytes = std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(config.data()),
                                                          config.size());
  ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.raw(sha256(config_bytes));
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.raw(config);
  write_records(w, model.parameters());
  w.u8(with_stats ? 1 : 0);
  if (with_stats) write_records(w, model.buffers());
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

StagedModel<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4, "magic") != std::string_view(kMagic, 4)) throw ParseError(0, "bad magic, expected \"SSKD\"");
  const std::uint16_t version = r.u16();
  if (version != kVersion) throw ParseError(4, "unsupported checkpoint version " + std::to_string(version));
  if (bytes.size() < 4 + 2 + 32 + 4 + 4 + 1 + 4) {
    throw ParseError(bytes.size(), "checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  }
  const std::size_t crc_at = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[crc_at + i]) << (8 * i);
  if (stored != crc32_of(bytes.first(crc_at))) {
    throw ParseError(crc_at, "checksum mismatch (file corrupted or truncated)");
  }
  ByteReader body(bytes.first(crc_at));
  body.raw(6, "header");
  const auto digest = body.span(32, "config digest");
  const std::size_t config_at = body.offset();
  const std::uint32_t config_len = body.u32();
  const std::string config_text(body.raw(config_len, "config text"));
  const auto expected = sha256(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(config_text.data()), config_text.size()));
  if (!std::equal(expected.begin(), expected.end(), digest.begin())) {
    throw ParseError(6, "config digest does not match the embedded config");
  }
  ModelConfig config;
  try {
    config = parse_config_text(config_text);
  } catch (const ConfigError& e) {
    throw ParseError(config_at, e.what());
  }
  StagedModel<float> model = build_model<float>(config, 0);

  const std::size_t params_at = body.offset();
  auto params = read_records(body);
  assign_records(params, model.parameters(), params_at);
  const std::size_t stats_at = body.offset();
  const std::uint8_t has_stats = body.u8();
  if (has_stats > 1) throw ParseError(stats_at, "invalid stats flag " + std::to_string(has_stats));
  if (has_stats) {
    auto buffers = read_records(body);
    assign_records(buffers, model.buffers(), stats_at + 1);
  }
  if (body.remaining() != 0) throw ParseError(body.offset(), "trailing bytes before checksum");
  return model;
}

void save_checkpoint(const StagedModel<float>& model, const std::filesystem::path& path, bool with_stats) {
  write_file(path, encode_checkpoint(model, with_stats));
}

StagedModel<float> load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace sskd
