#include "softennet/kv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace softennet {
namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

KeyValueFile KeyValueFile::parse(const std::string& text) {
  KeyValueFile file;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(fmt::format("line {}: expected 'key = value', got '{}'", line_no, stripped));
    }
    const std::string key = trim(stripped.substr(0, eq));
    if (key.empty()) throw std::runtime_error(fmt::format("line {}: empty key", line_no));
    if (file.contains(key)) throw std::runtime_error(fmt::format("line {}: duplicate key '{}'", line_no, key));
    file.set(key, trim(stripped.substr(eq + 1)));
  }
  return file;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse(buffer.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

const std::string& KeyValueFile::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::runtime_error(fmt::format("missing key '{}'", key));
  return it->second;
}

double KeyValueFile::get_double(const std::string& key) const {
  const std::string& raw = get(key);
  try {
    std::size_t used = 0;
    const double value = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument("trailing characters");
    return value;
  } catch (const std::exception&) {
    throw std::runtime_error(fmt::format("key '{}': '{}' is not a number", key, raw));
  }
}

long long KeyValueFile::get_int(const std::string& key) const {
  const std::string& raw = get(key);
  long long value = 0;
  const auto result = std::from_chars(raw.data(), raw.data() + raw.size(), value);
  if (result.ec != std::errc{} || result.ptr != raw.data() + raw.size()) {
    throw std::runtime_error(fmt::format("key '{}': '{}' is not an integer", key, raw));
  }
  return value;
}

bool KeyValueFile::get_bool(const std::string& key) const {
  const std::string& raw = get(key);
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw std::runtime_error(fmt::format("key '{}': '{}' is not a boolean", key, raw));
}

std::vector<double> KeyValueFile::get_doubles(const std::string& key) const {
  std::vector<double> values;
  std::istringstream in(get(key));
  std::string token;
  while (std::getline(in, token, ',')) {
    token = trim(token);
    if (token.empty()) continue;
    try {
      values.push_back(std::stod(token));
    } catch (const std::exception&) {
      throw std::runtime_error(fmt::format("key '{}': '{}' is not a number", key, token));
    }
  }
  return values;
}

double KeyValueFile::get_double(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}

long long KeyValueFile::get_int(const std::string& key, long long fallback) const {
  return contains(key) ? get_int(key) : fallback;
}

bool KeyValueFile::get_bool(const std::string& key, bool fallback) const {
  return contains(key) ? get_bool(key) : fallback;
}

std::string KeyValueFile::get(const std::string& key, const std::string& fallback) const {
  return contains(key) ? get(key) : fallback;
}

void KeyValueFile::set(const std::string& key, const std::string& value) {
  if (!contains(key)) order_.push_back(key);
  values_[key] = value;
}

void KeyValueFile::set(const std::string& key, double value) { set(key, format_double(value)); }

void KeyValueFile::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

void KeyValueFile::set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

void KeyValueFile::set(const std::string& key, const std::vector<double>& values) {
  std::string joined;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) joined += ", ";
    joined += format_double(values[i]);
  }
  set(key, joined);
}

std::vector<std::string> KeyValueFile::keys() const { return order_; }

std::string KeyValueFile::to_text() const {
  std::string out;
  for (const auto& key : order_) out += key + " = " + values_.at(key) + "\n";
  return out;
}

void KeyValueFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << to_text();
}

}  // namespace softennet
