#pragma once

// Binary container shared by checkpoints, grasp caches and demo datasets.
//
//   offset  size  field
//   0       4     magic "PTLD"
//   4       2     format version (u16, little-endian)
//   6       4     header length H (u32)
//   10      H     header, UTF-8 JSON
//   10+H    ...   records: u64 payload length followed by the payload
//   end-16  8     record count (u64)
//   end-8   8     checksum (u64)
//
// The checksum is FNV-1a 64 over magic, version, the header JSON with the
// "created_at" key removed, and every record (length prefix included). Numbers
// inside record payloads are little-endian; doubles are IEEE-754 binary64.

#include "ptld/autodiff.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld::io {

inline constexpr std::uint16_t kFormatVersion = 1;

class CorruptContainer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<Bytes> records;
};

Bytes encode(const Container& c);
Container decode(std::span<const std::uint8_t> bytes);
std::uint64_t checksum(const Container& c);

void write_file(const std::filesystem::path& path, const Container& c);
Container read_file(const std::filesystem::path& path);
Bytes read_bytes(const std::filesystem::path& path);

// Stamps "created_at" with the current UTC time, or SOURCE_DATE_EPOCH when set.
void stamp_created(nlohmann::json& header);

class RecordWriter {
 public:
  RecordWriter& u64(std::uint64_t v);
  RecordWriter& f64(double v);
  RecordWriter& f64s(std::span<const double> v);
  RecordWriter& str(const std::string& s);
  RecordWriter& tensor(const std::string& name, const ad::Tensor& t);
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class RecordReader {
 public:
  explicit RecordReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::string str();
  std::pair<std::string, ad::Tensor> tensor();
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// ParamSet values (not moments) as one tensor record per parameter.
void append_params(Container& c, const std::string& group, const ad::ParamSet& params);
ad::ParamSet read_params(const Container& c, const std::string& group);

std::string hex64(std::uint64_t v);

// Encoding with "created_at" removed; equal for artifacts that differ only in creation time.
Bytes canonical_bytes(const Container& c);

}  // namespace ptld::io
