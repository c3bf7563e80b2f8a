#include "heparl/config.hpp"

#include "heparl/error.hpp"
#include "heparl/io.hpp"

namespace heparl {

Config Config::parse(std::string_view text) {
  Config cfg;
  std::size_t lineno = 0;
  for (const auto& raw_line : io::split(text, '\n')) {
    ++lineno;
    std::string line = raw_line;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = io::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::config, "config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = io::trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw Error(Errc::config, "config line " + std::to_string(lineno) + ": empty key");
    cfg.set(key, io::trim(std::string_view(line).substr(eq + 1)));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  try {
    return parse(io::read_file(path));
  } catch (const Error& e) {
    if (e.code() == Errc::io) throw Error(Errc::config, e.what());
    throw;
  }
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

bool Config::has(const std::string& key) const { return values_.count(key) != 0; }

std::optional<std::string> Config::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  if (auto v = raw(key)) return *v;
  defaults_used_[key] = fallback;
  return fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
  if (auto v = raw(key)) {
    try {
      return io::parse_double(*v);
    } catch (const Error&) {
      throw Error(Errc::config, "config key '" + key + "' is not a number: " + *v);
    }
  }
  defaults_used_[key] = io::format_double(fallback);
  return fallback;
}

long long Config::get_int(const std::string& key, long long fallback) const {
  if (auto v = raw(key)) {
    try {
      return io::parse_int(*v);
    } catch (const Error&) {
      throw Error(Errc::config, "config key '" + key + "' is not an integer: " + *v);
    }
  }
  defaults_used_[key] = std::to_string(fallback);
  return fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (auto v = raw(key)) {
    try {
      const std::string t = io::trim(*v);
      std::size_t used = 0;
      const auto value = std::stoull(t, &used);
      if (used != t.size() || t.front() == '-') throw std::invalid_argument(t);
      return value;
    } catch (const std::exception&) {
      throw Error(Errc::config, "config key '" + key + "' is not an unsigned integer: " + *v);
    }
  }
  defaults_used_[key] = std::to_string(fallback);
  return fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (auto v = raw(key)) {
    const std::string t = io::trim(*v);
    if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
    if (t == "0" || t == "false" || t == "no" || t == "off") return false;
    throw Error(Errc::config, "config key '" + key + "' is not a boolean: " + *v);
  }
  defaults_used_[key] = fallback ? "true" : "false";
  return fallback;
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  if (auto v = raw(key)) {
    std::vector<double> out;
    try {
      for (const auto& part : io::split(*v, ',')) out.push_back(io::parse_double(part));
    } catch (const Error&) {
      throw Error(Errc::config, "config key '" + key + "' is not a number list: " + *v);
    }
    return out;
  }
  std::string joined;
  for (std::size_t i = 0; i < fallback.size(); ++i) {
    if (i) joined += ',';
    joined += io::format_double(fallback[i]);
  }
  defaults_used_[key] = joined;
  return fallback;
}

std::map<std::string, std::string> Config::resolved() const {
  auto out = defaults_used_;
  for (const auto& [k, v] : values_) out[k] = v;
  return out;
}

}  // namespace heparl
