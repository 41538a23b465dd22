#include "ptld/container.hpp"

#include <bit>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ptld::io {

namespace {

constexpr std::uint8_t kMagic[4] = {'P', 'T', 'L', 'D'};
constexpr std::size_t kTrailer = 16;

void put_le(Bytes& out, std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  return v;
}

std::string header_text(const nlohmann::json& header, bool drop_timestamp) {
  if (!drop_timestamp || !header.contains("created_at")) return header.dump();
  nlohmann::json copy = header;
  copy.erase("created_at");
  return copy.dump();
}

Bytes encode_impl(const Container& c, bool drop_timestamp) {
  const std::string head = header_text(c.header, drop_timestamp);
  Bytes out(std::begin(kMagic), std::end(kMagic));
  put_le(out, kFormatVersion, 2);
  put_le(out, head.size(), 4);
  out.insert(out.end(), head.begin(), head.end());
  for (const auto& r : c.records) {
    put_le(out, r.size(), 8);
    out.insert(out.end(), r.begin(), r.end());
  }
  put_le(out, c.records.size(), 8);
  put_le(out, checksum(c), 8);
  return out;
}

}  // namespace

std::uint64_t checksum(const Container& c) {
  Bytes buf(std::begin(kMagic), std::end(kMagic));
  put_le(buf, kFormatVersion, 2);
  const std::string head = header_text(c.header, true);
  buf.insert(buf.end(), head.begin(), head.end());
  std::uint64_t h = ad::fnv1a(buf.data(), buf.size());
  for (const auto& r : c.records) {
    Bytes len;
    put_le(len, r.size(), 8);
    h = ad::fnv1a(len.data(), len.size(), h);
    h = ad::fnv1a(r.data(), r.size(), h);
  }
  return h;
}

Bytes encode(const Container& c) { return encode_impl(c, false); }

Bytes canonical_bytes(const Container& c) { return encode_impl(c, true); }

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 + kTrailer) throw CorruptContainer("container truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptContainer("bad magic");
  const auto version = get_le(bytes, 4, 2);
  if (version != kFormatVersion) {
    throw CorruptContainer("unsupported format version " + std::to_string(version));
  }
  const std::size_t head_len = get_le(bytes, 6, 4);
  const std::size_t end = bytes.size() - kTrailer;
  if (10 + head_len > end) throw CorruptContainer("header length exceeds file");

  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + head_len);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptContainer(std::string("header is not valid JSON: ") + e.what());
  }
  std::size_t pos = 10 + head_len;
  while (pos < end) {
    if (pos + 8 > end) throw CorruptContainer("record length truncated");
    const std::uint64_t n = get_le(bytes, pos, 8);
    pos += 8;
    if (n > end - pos) throw CorruptContainer("record payload truncated");
    c.records.emplace_back(bytes.begin() + pos, bytes.begin() + pos + n);
    pos += n;
  }
  const std::uint64_t count = get_le(bytes, end, 8);
  const std::uint64_t sum = get_le(bytes, end + 8, 8);
  if (count != c.records.size()) throw CorruptContainer("record count mismatch");
  if (sum != checksum(c)) throw CorruptContainer("checksum mismatch");
  return c;
}

Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const Container& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const Bytes b = encode(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Container read_file(const std::filesystem::path& path) {
  const Bytes b = read_bytes(path);
  return decode(b);
}

void stamp_created(nlohmann::json& header) {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::atoll(epoch));
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  header["created_at"] = os.str();
}

RecordWriter& RecordWriter::u64(std::uint64_t v) {
  put_le(buf_, v, 8);
  return *this;
}

RecordWriter& RecordWriter::f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }

RecordWriter& RecordWriter::f64s(std::span<const double> v) {
  for (double x : v) f64(x);
  return *this;
}

RecordWriter& RecordWriter::str(const std::string& s) {
  u64(s.size());
  buf_.insert(buf_.end(), s.begin(), s.end());
  return *this;
}

RecordWriter& RecordWriter::tensor(const std::string& name, const ad::Tensor& t) {
  str(name);
  u64(t.shape.size());
  for (auto d : t.shape) u64(d);
  return f64s(t.data);
}

void RecordReader::need(std::size_t n) const {
  if (n > bytes_.size() - pos_) throw CorruptContainer("record field truncated");
}

std::uint64_t RecordReader::u64() {
  need(8);
  const auto v = get_le(bytes_, pos_, 8);
  pos_ += 8;
  return v;
}

double RecordReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> RecordReader::f64s(std::size_t n) {
  need(n * 8);
  std::vector<double> out(n);
  for (auto& x : out) x = f64();
  return out;
}

std::string RecordReader::str() {
  const auto n = u64();
  need(n);
  std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
  pos_ += n;
  return s;
}

std::pair<std::string, ad::Tensor> RecordReader::tensor() {
  std::string name = str();
  const auto rank = u64();
  if (rank > 8) throw CorruptContainer("tensor rank too large");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = u64();
  const std::size_t n = ad::shape_product(shape);
  return {std::move(name), ad::Tensor(shape, f64s(n))};
}

void append_params(Container& c, const std::string& group, const ad::ParamSet& params) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, p] : params.entries()) {
    c.records.push_back(RecordWriter().str(group).tensor(name, p.value).take());
    names.push_back(name);
  }
  c.header["groups"][group] = {{"params", names},
                               {"step", params.step()},
                               {"hash", hex64(params.value_hash())}};
}

ad::ParamSet read_params(const Container& c, const std::string& group) {
  if (!c.header.contains("groups") || !c.header["groups"].contains(group)) {
    throw CorruptContainer("missing parameter group " + group);
  }
  ad::ParamSet out;
  for (const auto& r : c.records) {
    RecordReader rr(r);
    if (rr.str() != group) continue;
    auto [name, t] = rr.tensor();
    out.add(name, std::move(t));
  }
  const auto& g = c.header["groups"][group];
  out.set_step(g.at("step").get<std::int64_t>());
  if (hex64(out.value_hash()) != g.at("hash").get<std::string>()) {
    throw CorruptContainer("parameter hash mismatch for group " + group);
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace ptld::io
