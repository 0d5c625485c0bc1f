#include "spt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace spt {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian f64");

namespace {

constexpr char kMagic[8] = {'S', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

ordered_json config_sections_for_match(const RunConfig& config) {
  // The sections that determine the parameter set and forward behaviour.
  ordered_json full = ordered_json::parse(run_config_to_json(config));
  ordered_json out;
  out["model"] = full["model"];
  out["peft"] = full["peft"];
  out["vra"] = full["vra"];
  out["sdt"] = full["sdt"];
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, SptModel& model, const RunConfig& config) {
  nn::ParamList params = model.params();

  ordered_json header;
  header["format_version"] = 1;
  header["config"] = ordered_json::parse(run_config_to_json(config));
  ordered_json tensors = ordered_json::array();
  for (const nn::NamedTensor& nt : params) {
    ordered_json t;
    t["name"] = nt.name;
    t["shape"] = nt.tensor->shape();
    t["buffer"] = nt.buffer;
    t["requires_grad"] = nt.tensor->requires_grad();
    tensors.push_back(t);
  }
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const nn::NamedTensor& nt : params) {
    const auto& data = nt.tensor->storage()->data;
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) fail(ErrorKind::io, "checkpoint: write failed for " + path);
}

namespace {

ordered_json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::schema, "checkpoint: bad magic in " + path);
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (in.gcount() != sizeof(header_len))
    fail(ErrorKind::schema, "checkpoint: truncated header length in " + path);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len))
    fail(ErrorKind::schema, "checkpoint: truncated header in " + path);
  ordered_json header;
  try {
    header = ordered_json::parse(header_text);
  } catch (const std::exception& e) {
    fail(ErrorKind::schema, std::string("checkpoint: header parse error: ") + e.what());
  }
  if (header.value("format_version", 0) != 1)
    fail(ErrorKind::schema, "checkpoint: unsupported format version in " + path);
  return header;
}

}  // namespace

RunConfig read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "checkpoint: cannot open " + path);
  ordered_json header = read_header(in, path);
  return run_config_from_json(header["config"].dump());
}

SptModel load_checkpoint(const std::string& path, const RunConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "checkpoint: cannot open " + path);
  ordered_json header = read_header(in, path);

  RunConfig echoed = run_config_from_json(header["config"].dump());
  if (config_sections_for_match(echoed).dump() != config_sections_for_match(config).dump())
    fail(ErrorKind::schema,
         "checkpoint: model/peft/vra/sdt sections do not match the checkpoint in " + path);

  SptModel model = SptModel::build(echoed.model, echoed.vra, echoed.sdt);
  if (!echoed.peft.targets.empty()) attach(model, echoed.peft);

  nn::ParamList params = model.params();
  const ordered_json& tensors = header["tensors"];
  if (tensors.size() != params.size())
    fail(ErrorKind::schema, "checkpoint: tensor count mismatch in " + path);
  for (size_t i = 0; i < params.size(); ++i) {
    const ordered_json& t = tensors[i];
    if (t["name"].get<std::string>() != params[i].name)
      fail(ErrorKind::schema, "checkpoint: tensor order mismatch at " + params[i].name);
    const std::vector<int64_t> shape = t["shape"].get<std::vector<int64_t>>();
    if (shape != params[i].tensor->shape())
      fail(ErrorKind::schema, "checkpoint: shape mismatch for " + params[i].name);
    auto& data = params[i].tensor->storage()->data;
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(data.size() * sizeof(double)))
      fail(ErrorKind::schema, "checkpoint: truncated payload at " + params[i].name);
    params[i].tensor->set_requires_grad(t["requires_grad"].get<bool>());
  }
  return model;
}

}  // namespace spt
