#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "malle/tensor.hpp"

namespace malle {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Flat key=value run configuration. Every key must exist in the schema;
/// values are validated by type; unset keys fall back to typed defaults.
class RunConfig {
 public:
  enum class Type { Int, Float, String, Bool, FloatList };

  RunConfig() {
    // model.*
    def("model.arch", Type::String, "dncnn");
    def("model.depth", Type::Int, "3");
    def("model.channels", Type::Int, "16");
    def("model.malle_mid_k", Type::Int, "0");
    def("model.k", Type::Int, "1");
    def("model.blocks", Type::Int, "2");
    def("model.levels", Type::Int, "4");
    def("model.in_channels", Type::Int, "3");
    // train.*
    def("train.iterations", Type::Int, "2000");
    def("train.batch", Type::Int, "8");
    def("train.patch", Type::Int, "32");
    def("train.lr", Type::Float, "0.001");
    def("train.beta1", Type::Float, "0.9");
    def("train.beta2", Type::Float, "0.999");
    def("train.eps", Type::Float, "1e-8");
    def("train.sigma", Type::FloatList, "25");
    def("train.blind", Type::Bool, "false");
    def("train.ckpt_every", Type::Int, "500");
    def("train.eval_every", Type::Int, "500");
    def("train.clip_norm", Type::Float, "1.0");
    // data.*
    def("data.corpus_images", Type::Int, "24");
    def("data.corpus_size", Type::Int, "96");
    def("data.val_images", Type::Int, "4");
    // bench.*
    def("bench.h", Type::Int, "256");
    def("bench.w", Type::Int, "256");
    def("bench.c", Type::Int, "16");
    def("bench.reps", Type::Int, "5");
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                          ": expected key=value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) {
    auto it = schema_.find(key);
    if (it == schema_.end()) throw ConfigError("config: unknown key '" + key + "'");
    validate_value(key, it->second.type, value);
    values_[key] = value;
  }

  int geti(const std::string& key) const { return std::stoi(raw(key, Type::Int)); }
  double getf(const std::string& key) const { return std::stod(raw(key, Type::Float)); }
  std::string gets(const std::string& key) const { return raw(key, Type::String); }
  bool getb(const std::string& key) const { return raw(key, Type::Bool) == "true"; }
  std::vector<float> get_floats(const std::string& key) const {
    std::vector<float> out;
    std::istringstream is(raw(key, Type::FloatList));
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stof(tok));
    return out;
  }

  /// Canonical text of the effective configuration, schema order.
  std::string effective() const {
    std::ostringstream os;
    for (const auto& [key, entry] : schema_) {
      auto it = values_.find(key);
      os << key << "=" << (it == values_.end() ? entry.default_value : it->second) << "\n";
    }
    return os.str();
  }

 private:
  struct Entry {
    Type type;
    std::string default_value;
  };

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  void def(const std::string& key, Type type, const std::string& default_value) {
    schema_[key] = Entry{type, default_value};
  }

  const std::string& raw(const std::string& key, Type expect) const {
    auto it = schema_.find(key);
    if (it == schema_.end()) throw ConfigError("config: unknown key '" + key + "'");
    if (it->second.type != expect) throw ConfigError("config: type mismatch reading '" + key + "'");
    auto v = values_.find(key);
    return v == values_.end() ? it->second.default_value : v->second;
  }

  static void validate_value(const std::string& key, Type type, const std::string& value) {
    try {
      switch (type) {
        case Type::Int:
          (void)std::stoi(value);
          break;
        case Type::Float:
          (void)std::stod(value);
          break;
        case Type::Bool:
          if (value != "true" && value != "false")
            throw ConfigError("config: '" + key + "' must be true or false");
          break;
        case Type::FloatList: {
          std::istringstream is(value);
          std::string tok;
          bool any = false;
          while (std::getline(is, tok, ',')) {
            (void)std::stof(tok);
            any = true;
          }
          if (!any) throw std::invalid_argument("empty");
          break;
        }
        case Type::String:
          break;
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
    }
  }

  std::map<std::string, Entry> schema_;
  std::map<std::string, std::string> values_;
};

}  // namespace malle
