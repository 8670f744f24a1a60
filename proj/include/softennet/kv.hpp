#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace softennet {

/// Flat `key = value` text used by camera.txt and the *.cfg files.
/// Blank lines and lines starting with '#' are ignored. Keys are unique.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text);
  static KeyValueFile load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get(const std::string& key, const std::string& fallback) const;

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }
  void set(const std::string& key, bool value);
  void set(const std::string& key, const std::vector<double>& values);

  // Insertion order; config readers use it to reject unknown keys.
  std::vector<std::string> keys() const;

  // Keys are written in insertion order so files are byte-stable.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

// Shortest representation that round-trips a double exactly.
std::string format_double(double value);

}  // namespace softennet
