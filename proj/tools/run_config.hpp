#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace regvit::cli {

using Json = nlohmann::ordered_json;

enum class Kind { UInt, Int, Float, Bool, String, Choice, NumberOrAuto, UIntList, StringList };

// One configurable value: its dotted config path, type, default (null when
// required) and optional command-line flag.
struct Key {
  std::string path;
  Kind kind;
  Json fallback;
  std::string flag;  // "" for config-file-only keys
  std::string help;
  std::vector<std::string> choices = {};
};

// Merges defaults, an optional JSON config file and command-line flags.
// Unknown config keys, type errors and file/flag disagreements raise
// UsageError naming the key.
class Schema {
 public:
  Schema(std::string command, std::vector<Key> keys);

  void attach(CLI::App& sub);
  Json resolve() const;

  const std::string& command() const { return command_; }
  const std::optional<std::string>& run_dir() const { return run_dir_; }
  const std::string& out_root() const { return out_root_; }

 private:
  std::string command_;
  std::vector<Key> keys_;
  std::map<std::string, std::string> cli_values_;
  std::map<std::string, bool> cli_flags_;
  std::string config_file_;
  std::optional<std::string> run_dir_;
  std::string out_root_ = "runs";
};

// Value parsed from text for a given key; throws UsageError on mismatch.
Json parse_value(const Key& key, const std::string& text);

// Typed access to a resolved config by dotted path.
const Json& at(const Json& config, const std::string& path);

// Run directory: explicit, or <out_root>/<command>-<first 12 hex of sha256>.
// A directory left by an earlier run (it has a manifest) is cleared; any other
// non-empty directory is refused.
std::filesystem::path prepare_run_dir(const Schema& schema, const Json& resolved);

// Model keys under "model." shared by train and complexity.
std::vector<Key> model_keys();
// Scene keys under "data." (image size and channels come from the model).
std::vector<Key> scene_keys();

}  // namespace regvit::cli
