#include "ptld/config.hpp"

#include "ptld/autodiff.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

namespace ptld {

namespace {

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key " + key + ": expected a number, got '" + s + "'");
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

Config Config::parse_string(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  Config c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      c.values_[section] = trim(body.data());
      continue;
    }
    for (const auto& [key, leaf] : body) c.values_[section + "." + key] = trim(leaf.data());
  }
  return c;
}

Config Config::parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }
void Config::set(const std::string& key, double value) { values_[key] = format_double(value); }
void Config::set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
void Config::set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

void Config::set(const std::string& key, const std::vector<double>& value) {
  std::string s;
  for (std::size_t i = 0; i < value.size(); ++i) s += (i ? ", " : "") + format_double(value[i]);
  values_[key] = s;
}

double Config::get(const std::string& key, double fallback) {
  if (!has(key)) {
    set(key, fallback);
    return fallback;
  }
  return parse_double(key, values_.at(key));
}

long long Config::get(const std::string& key, long long fallback) {
  if (!has(key)) {
    set(key, fallback);
    return fallback;
  }
  const std::string& s = values_.at(key);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("config key " + key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

std::size_t Config::get(const std::string& key, std::size_t fallback) {
  const long long v = get(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError("config key " + key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

bool Config::get(const std::string& key, bool fallback) {
  if (!has(key)) {
    set(key, fallback);
    return fallback;
  }
  const std::string& s = values_.at(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + s + "'");
}

std::string Config::get(const std::string& key, const std::string& fallback) {
  if (!has(key)) {
    set(key, fallback);
    return fallback;
  }
  return values_.at(key);
}

std::vector<double> Config::get(const std::string& key, const std::vector<double>& fallback) {
  if (!has(key)) {
    set(key, fallback);
    return fallback;
  }
  std::vector<double> out;
  std::stringstream ss(values_.at(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_double(key, item));
  }
  return out;
}

std::string Config::require(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing required config key " + key);
  return it->second;
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

Config Config::sections(const std::set<std::string>& names) const {
  Config out;
  for (const auto& [k, v] : values_) {
    const auto dot = k.find('.');
    if (dot != std::string::npos && names.count(k.substr(0, dot))) out.values_[k] = v;
  }
  return out;
}

std::string Config::dump() const {
  std::ostringstream os;
  std::string current;
  bool first = true;
  for (const auto& [k, v] : values_) {
    const auto dot = k.find('.');
    const std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
    const std::string name = dot == std::string::npos ? k : k.substr(dot + 1);
    if (first || section != current) {
      if (!first) os << "\n";
      if (!section.empty()) os << "[" << section << "]\n";
      current = section;
      first = false;
    }
    os << name << " = " << v << "\n";
  }
  return os.str();
}

std::uint64_t Config::hash() const {
  const std::string text = dump();
  return ad::fnv1a(text.data(), text.size());
}

}  // namespace ptld
