#include <bit>
#include <cstring>

#include "kvfuse/errors.hpp"
#include "kvfuse/model.hpp"

namespace kvfuse {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'K', 'V', 'F', 'U', 'S', 'E', '0', '1'};
constexpr int kVersion = 1;

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(std::string_view in) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

nlohmann::json manifest(std::span<const std::pair<std::string, Tensor>> tensors,
                        uint64_t& offset) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
  }
  return list;
}

Tensor read_tensor(std::string_view data, const nlohmann::json& entry) {
  Shape shape = entry.at("shape").get<Shape>();
  const auto offset = entry.at("offset").get<uint64_t>();
  const auto n = static_cast<uint64_t>(shape_numel(shape));
  if (offset > data.size() || n * sizeof(float) > data.size() - offset) {
    throw CheckpointError("checkpoint truncated: tensor '" + entry.at("name").get<std::string>() +
                          "' extends past end of data");
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), data.data() + offset, n * sizeof(float));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

std::string save_checkpoint(const Model& model, const nlohmann::json& meta,
                            std::span<const std::pair<std::string, Tensor>> extra) {
  const auto params = model.named_parameters();
  uint64_t offset = 0;
  nlohmann::json header;
  header["format"] = "kvfuse";
  header["version"] = kVersion;
  header["config"] = to_json(model.config);
  header["frozen"] = model.frozen();
  header["meta"] = meta;
  header["tensors"] = manifest(params, offset);
  header["extra_tensors"] = manifest(extra, offset);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  auto append = [&out](const Tensor& t) {
    auto d = t.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
  };
  for (const auto& [name, t] : params) append(t);
  for (const auto& [name, t] : extra) append(t);
  return out;
}

Checkpoint read_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a kvfuse checkpoint (bad magic)");
  }
  const uint64_t header_len = get_u64(bytes.substr(8, 8));
  if (header_len > bytes.size() - 16) throw CheckpointError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::string_view data = bytes.substr(16 + header_len);

  Checkpoint ck;
  try {
    if (header.value("format", "") != "kvfuse" || header.value("version", 0) != kVersion) {
      throw CheckpointError("unsupported checkpoint format/version");
    }
    ModelConfig cfg = model_config_from_json(header.at("config"));
    cfg.validate();
    // Build the parameter layout from the config, then fill it.
    Model m = init_model(cfg, 0);
    auto expected = m.named_parameters();
    const auto& entries = header.at("tensors");
    if (entries.size() != expected.size()) {
      throw CheckpointError("checkpoint tensor count does not match config");
    }
    uint64_t total = 0;
    for (size_t i = 0; i < expected.size(); ++i) {
      const auto& e = entries[i];
      if (e.at("name").get<std::string>() != expected[i].first) {
        throw CheckpointError("checkpoint manifest order mismatch at '" +
                              e.at("name").get<std::string>() + "'");
      }
      Tensor loaded = read_tensor(data, e);
      if (loaded.shape() != expected[i].second.shape()) {
        throw CheckpointError("checkpoint shape mismatch for '" + expected[i].first + "'");
      }
      Tensor dst = expected[i].second;
      std::copy(loaded.data().begin(), loaded.data().end(), dst.mutable_data().begin());
      total += static_cast<uint64_t>(loaded.numel()) * sizeof(float);
    }
    for (const auto& e : header.at("extra_tensors")) {
      Tensor t = read_tensor(data, e);
      total += static_cast<uint64_t>(t.numel()) * sizeof(float);
      ck.extra.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    if (total != data.size()) throw CheckpointError("checkpoint data size mismatch");
    if (header.value("frozen", false)) m.freeze();
    ck.model = std::move(m);
    ck.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  return ck;
}

Model load_checkpoint(std::string_view bytes) { return read_checkpoint(bytes).model; }

}  // namespace kvfuse
