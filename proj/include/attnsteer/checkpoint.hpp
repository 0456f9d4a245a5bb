#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "attnsteer/model.hpp"

namespace attnsteer {

// Checkpoint layout: 8-byte magic, little-endian u64 header length, JSON
// header (config, named block table, checksum), then the raw f64 payload of
// every block back to back. Round-trips are bit-exact because the payload is
// written byte for byte.

inline constexpr char kCheckpointMagic[8] = {'A', 'T', 'S', 'M', 'D', 'L', '0', '1'};

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d_model", cfg.d_model},   {"n_layers", cfg.n_layers},
                        {"n_heads", cfg.n_heads},   {"grid", cfg.grid},
                        {"feat_dim", cfg.feat_dim}, {"vocab_size", cfg.vocab_size},
                        {"max_seq", cfg.max_seq},   {"seed", cfg.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.grid = j.at("grid").get<int>();
  cfg.feat_dim = j.at("feat_dim").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_seq = j.at("max_seq").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  nlohmann::json blocks = nlohmann::json::array();
  uint64_t offset = 0;
  params.for_each_block([&](const std::string& name, const Tensor& t) {
    blocks.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size() * sizeof(double);
  });
  char checksum_hex[17];
  std::snprintf(checksum_hex, sizeof(checksum_hex), "%016llx",
                static_cast<unsigned long long>(params_checksum(params)));
  nlohmann::json header{{"config", config_to_json(params.cfg)},
                        {"blocks", std::move(blocks)},
                        {"checksum", checksum_hex}};
  std::string header_text = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open checkpoint for writing: " + path);
  f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  uint64_t hlen = header_text.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  params.for_each_block([&](const std::string&, const Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  });
  if (!f) throw io_error("write failed for checkpoint: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic)];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw io_error("not a model checkpoint (bad magic): " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen == 0 || hlen > (1ull << 24))
    throw io_error("corrupt checkpoint header length: " + path);
  std::string header_text(hlen, '\0');
  f.read(header_text.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw io_error("truncated checkpoint header: " + path);

  nlohmann::json header = nlohmann::json::parse(header_text, nullptr, false);
  if (header.is_discarded()) throw io_error("unparseable checkpoint header: " + path);
  ModelConfig cfg = config_from_json(header.at("config"));

  // Allocate the standard block structure for this config, then fill each
  // block from the table. Every expected block must be present with the
  // expected shape, and no extras are tolerated.
  ModelParams params = init_model(cfg);
  size_t filled = 0;
  const auto& table = header.at("blocks");
  std::streampos data_start = f.tellg();
  params.for_each_block([&](const std::string& name, Tensor& t) {
    bool found = false;
    for (const auto& entry : table) {
      if (entry.at("name").get<std::string>() != name) continue;
      auto shape = entry.at("shape").get<std::vector<int>>();
      require(shape == t.shape, "checkpoint block " + name + " has shape " +
                                    Tensor::shape_str_of(shape) + ", expected " +
                                    t.shape_str());
      f.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
      f.read(reinterpret_cast<char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      if (!f) throw io_error("truncated checkpoint payload at block " + name + ": " + path);
      found = true;
      break;
    }
    if (!found) throw io_error("checkpoint missing block " + name + ": " + path);
    ++filled;
  });
  if (filled != table.size())
    throw io_error("checkpoint has " + std::to_string(table.size()) +
                   " blocks, expected " + std::to_string(filled) + ": " + path);

  char checksum_hex[17];
  std::snprintf(checksum_hex, sizeof(checksum_hex), "%016llx",
                static_cast<unsigned long long>(params_checksum(params)));
  std::string stored = header.at("checksum").get<std::string>();
  if (stored != checksum_hex)
    throw io_error("checkpoint checksum mismatch (stored " + stored + ", recomputed " +
                   checksum_hex + "): " + path);
  return params;
}

}  // namespace attnsteer
