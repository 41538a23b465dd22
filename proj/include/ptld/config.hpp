#pragma once

// Sectioned key = value configuration. Keys are addressed as "section.key".

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptld {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse_string(const std::string& text);
  static Config parse_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }
  void set(const std::string& key, std::size_t value) { set(key, static_cast<long long>(value)); }
  void set(const std::string& key, bool value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, const std::vector<double>& value);

  // Getters write the default back when the key is absent, so the config
  // always ends up holding the effective value of every field that was read.
  double get(const std::string& key, double fallback);
  long long get(const std::string& key, long long fallback);
  int get(const std::string& key, int fallback) { return static_cast<int>(get(key, static_cast<long long>(fallback))); }
  std::size_t get(const std::string& key, std::size_t fallback);
  bool get(const std::string& key, bool fallback);
  std::string get(const std::string& key, const std::string& fallback);
  std::string get(const std::string& key, const char* fallback) { return get(key, std::string(fallback)); }
  std::vector<double> get(const std::string& key, const std::vector<double>& fallback);

  std::string require(const std::string& key) const;

  // Overlay another config's keys on this one.
  void merge(const Config& other);
  // Subset of keys whose section is in `sections`.
  Config sections(const std::set<std::string>& sections) const;

  std::string dump() const;
  std::uint64_t hash() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string format_double(double v);

}  // namespace ptld
