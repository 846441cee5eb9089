#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "dvfi/training.hpp"

namespace dvfi {

namespace {

constexpr char kMagic[8] = {'D', 'V', 'F', 'I', 'C', 'K', 'P', 'T'};

void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64_le(std::string& blob, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>(bits >> (8 * i)));
}

double get_f64_le(const unsigned char* b) { return std::bit_cast<double>(get_u64_le(b)); }

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "dvfi-checkpoint";
  header["version"] = 1;
  header["dtype"] = "float64";
  header["endianness"] = "little";
  header["config"] = to_json(ckpt.config);
  header["meta"] = {{"step", ckpt.meta.step}, {"seed", ckpt.meta.seed}, {"loss_tail", ckpt.meta.loss_tail}};
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.params) {
    const std::size_t offset = blob.size();
    for (nn::Index i = 0; i < t.numel(); ++i) put_f64_le(blob, t.value()[i]);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", blob.size() - offset}});
  }
  header["tensors"] = std::move(tensors);
  header["blob_bytes"] = blob.size();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(Kind::corrupt_header, path.string() + ": not a checkpoint (bad magic)");
  const std::uint64_t header_len = get_u64_le(data + 8);
  if (header_len > bytes.size() - 16)
    throw CheckpointError(Kind::corrupt_header, path.string() + ": header length exceeds file size");

  nlohmann::json header;
  Checkpoint ck;
  std::vector<std::tuple<std::string, nn::Shape, std::uint64_t, std::uint64_t>> entries;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    if (header.at("format") != "dvfi-checkpoint" || header.at("dtype") != "float64")
      throw CheckpointError(Kind::corrupt_header, path.string() + ": unsupported format or dtype");
    ck.config = config_from_json(header.at("config"));
    const auto& meta = header.at("meta");
    ck.meta.step = meta.at("step").get<std::int64_t>();
    ck.meta.seed = meta.at("seed").get<std::uint64_t>();
    ck.meta.loss_tail = meta.at("loss_tail").get<std::vector<double>>();
    for (const auto& t : header.at("tensors"))
      entries.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<nn::Shape>(),
                           t.at("offset").get<std::uint64_t>(), t.at("nbytes").get<std::uint64_t>());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::corrupt_header, path.string() + ": corrupt header (" + e.what() + ")");
  }

  std::map<std::string, nn::Shape> expected;
  for (auto& [name, shape] : parameter_shapes(ck.config)) expected.emplace(name, shape);
  std::set<std::string> seen;
  for (const auto& [name, shape, offset, nbytes] : entries) {
    auto it = expected.find(name);
    if (it == expected.end())
      throw CheckpointError(Kind::shape_mismatch, path.string() + ": tensor '" + name + "' is not part of the model");
    if (it->second != shape)
      throw CheckpointError(Kind::shape_mismatch, path.string() + ": tensor '" + name + "' has shape " +
                                                      nn::to_string(shape) + ", model expects " +
                                                      nn::to_string(it->second));
    if (nbytes != static_cast<std::uint64_t>(nn::numel(shape)) * 8)
      throw CheckpointError(Kind::shape_mismatch, path.string() + ": tensor '" + name + "' byte count does not match shape");
    seen.insert(name);
  }
  for (const auto& [name, _] : expected)
    if (!seen.count(name))
      throw CheckpointError(Kind::shape_mismatch, path.string() + ": tensor '" + name + "' is missing");

  const std::uint64_t blob_start = 16 + header_len, blob_size = bytes.size() - blob_start;
  for (const auto& [name, shape, offset, nbytes] : entries) {
    if (offset > blob_size || nbytes > blob_size - offset)
      throw CheckpointError(Kind::truncated_blob, path.string() + ": truncated blob (tensor '" + name + "')");
    nn::Vec<double> v(nn::numel(shape));
    for (nn::Index i = 0; i < v.size(); ++i) v[i] = get_f64_le(data + blob_start + offset + 8 * i);
    ck.params.add(name, shape, std::move(v));
  }
  return ck;
}

} // namespace dvfi
