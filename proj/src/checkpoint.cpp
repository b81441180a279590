#include "sdl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sdl {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'L', 'C', 'K', 'P', 'T', '1'};

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f64_le(std::string& out, double d) {
  put_u64_le(out, std::bit_cast<uint64_t>(d));
}

double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_u64_le(p)); }

}  // namespace

void Checkpoint::put(const std::string& name, Tensor t) {
  for (size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == name) {
      tensors_[i] = std::move(t);
      return;
    }
  order_.push_back(name);
  tensors_.push_back(std::move(t));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& n : order_)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == name) return tensors_[i];
  fail(Err::CheckpointCorrupt, "missing checkpoint entry " + name);
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["meta"] = meta_;
  nlohmann::json entries = nlohmann::json::array();
  int64_t offset = 0;
  for (size_t i = 0; i < order_.size(); ++i) {
    entries.push_back({{"name", order_[i]}, {"shape", tensors_[i].shape}, {"offset", offset}});
    offset += tensors_[i].numel();
  }
  manifest["entries"] = std::move(entries);

  std::string json_text = manifest.dump();
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u64_le(out, json_text.size());
  out += json_text;
  out.reserve(out.size() + static_cast<size_t>(offset) * 8);
  for (const Tensor& t : tensors_)
    for (double d : t.data) put_f64_le(out, d);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  require(f.good(), Err::IoError, "short write to " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Err::IoError, "cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());

  require(raw.size() >= 16 && std::memcmp(raw.data(), kMagic, sizeof(kMagic)) == 0,
          Err::CheckpointCorrupt, "bad magic in " + path);
  uint64_t json_len = get_u64_le(p + 8);
  require(raw.size() >= 16 + json_len, Err::CheckpointCorrupt, "truncated manifest in " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(raw.substr(16, json_len));
  } catch (const nlohmann::json::exception& e) {
    fail(Err::CheckpointCorrupt, std::string("manifest parse failure: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.meta_ = manifest.at("meta");
    size_t blob_off = 16 + json_len;
    int64_t blob_doubles = static_cast<int64_t>((raw.size() - blob_off) / 8);
    for (const auto& e : manifest.at("entries")) {
      std::string name = e.at("name").get<std::string>();
      std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
      int64_t offset = e.at("offset").get<int64_t>();
      int64_t n = Tensor::count(shape);
      require(offset >= 0 && offset + n <= blob_doubles, Err::CheckpointCorrupt,
              "entry " + name + " extends past end of blob");
      Tensor t(shape);
      const unsigned char* src = p + blob_off + static_cast<size_t>(offset) * 8;
      for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i)] = get_f64_le(src + i * 8);
      ck.put(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Err::CheckpointCorrupt, std::string("malformed manifest: ") + e.what());
  } catch (const SdlError& e) {
    if (e.code() == Err::CheckpointCorrupt) throw;
    fail(Err::CheckpointCorrupt, std::string("invalid entry: ") + e.what());
  }
  return ck;
}

}  // namespace sdl
