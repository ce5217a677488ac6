#include "run_config.hpp"

#include <charconv>
#include <sstream>

#include "regvit/errors.hpp"
#include "regvit/report.hpp"
#include "regvit/train.hpp"
#include "regvit/vit.hpp"

namespace regvit::cli {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, sep)) parts.push_back(item);
  return parts;
}

std::string describe(const Json& v) { return v.dump(); }

bool is_unsigned(const Json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); }

// Normalizes a JSON value from a config file; throws UsageError on type mismatch.
Json check_json(const Key& key, const Json& v) {
  auto bad = [&](const char* expected) {
    return UsageError("config key '" + key.path + "' expects " + expected + ", got " + describe(v));
  };
  switch (key.kind) {
    case Kind::UInt:
      if (!is_unsigned(v)) throw bad("a non-negative integer");
      return v.get<std::uint64_t>();
    case Kind::Int:
      if (!v.is_number_integer()) throw bad("an integer");
      return v.get<std::int64_t>();
    case Kind::Float:
      if (!v.is_number()) throw bad("a number");
      return v.get<double>();
    case Kind::Bool:
      if (!v.is_boolean()) throw bad("true or false");
      return v;
    case Kind::String:
      if (!v.is_string()) throw bad("a string");
      return v;
    case Kind::Choice: {
      if (!v.is_string() || std::find(key.choices.begin(), key.choices.end(), v.get<std::string>()) == key.choices.end()) {
        std::string list;
        for (const auto& c : key.choices) list += (list.empty() ? "" : "|") + c;
        throw bad(list.c_str());
      }
      return v;
    }
    case Kind::NumberOrAuto:
      if (v.is_number()) return v.get<double>();
      if (v.is_string() && v.get<std::string>() == "auto") return v;
      throw bad("a number or \"auto\"");
    case Kind::UIntList: {
      if (!v.is_array()) throw bad("an array of non-negative integers");
      Json out = Json::array();
      for (const auto& item : v) {
        if (!is_unsigned(item)) throw bad("an array of non-negative integers");
        out.push_back(item.get<std::uint64_t>());
      }
      return out;
    }
    case Kind::StringList: {
      if (!v.is_array()) throw bad("an array of strings");
      for (const auto& item : v)
        if (!item.is_string()) throw bad("an array of strings");
      return v;
    }
  }
  return v;
}

void set_path(Json& root, const std::string& path, Json value) {
  Json* node = &root;
  const auto parts = split(path, '.');
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = std::move(value);
}

const Json* find_path(const Json& root, const std::string& path) {
  const Json* node = &root;
  for (const auto& part : split(path, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
  }
  return node;
}

// Collects every leaf path of a config file; arrays count as leaves.
void leaves(const Json& node, const std::string& prefix, std::vector<std::pair<std::string, Json>>& out) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) leaves(*it, path, out);
    else out.emplace_back(path, *it);
  }
}

double parse_double(const Key& key, const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw UsageError("--" + key.flag + " expects a number, got '" + text + "'");
  }
  return v;
}

std::int64_t parse_integer(const Key& key, const std::string& text, bool allow_negative) {
  std::int64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || (!allow_negative && v < 0)) {
    throw UsageError("--" + key.flag + " expects " + (allow_negative ? "an integer" : "a non-negative integer") +
                     ", got '" + text + "'");
  }
  return v;
}

}  // namespace

Json parse_value(const Key& key, const std::string& text) {
  switch (key.kind) {
    case Kind::UInt: return static_cast<std::uint64_t>(parse_integer(key, text, false));
    case Kind::Int: return parse_integer(key, text, true);
    case Kind::Float: return parse_double(key, text);
    case Kind::Bool:
      if (text == "true" || text == "on") return true;
      if (text == "false" || text == "off") return false;
      throw UsageError("--" + key.flag + " expects on|off, got '" + text + "'");
    case Kind::String: return text;
    case Kind::Choice: return check_json(key, Json(text));
    case Kind::NumberOrAuto:
      if (text == "auto") return text;
      return parse_double(key, text);
    case Kind::UIntList: {
      Json out = Json::array();
      for (const auto& part : split(text, ',')) out.push_back(static_cast<std::uint64_t>(parse_integer(key, part, false)));
      return out;
    }
    case Kind::StringList: {
      Json out = Json::array();
      for (const auto& part : split(text, ','))
        if (!part.empty()) out.push_back(part);
      return out;
    }
  }
  return text;
}

Schema::Schema(std::string command, std::vector<Key> keys) : command_(std::move(command)), keys_(std::move(keys)) {}

void Schema::attach(CLI::App& sub) {
  sub.add_option("--config", config_file_, "JSON config file; unknown keys are rejected");
  sub.add_option_function<std::string>("--run-dir", [this](const std::string& v) { run_dir_ = v; },
                                       "Write outputs here instead of <out-root>/<command>-<hash>");
  sub.add_option("--out-root", out_root_, "Parent of hashed run directories")->capture_default_str();
  for (const auto& key : keys_) {
    if (key.flag.empty()) continue;
    std::string help = key.help;
    if (!key.fallback.is_null()) help += " [default: " + (key.fallback.is_string() ? key.fallback.get<std::string>() : key.fallback.dump()) + "]";
    if (key.kind == Kind::Bool) {
      sub.add_flag_function("--" + key.flag, [this, path = key.path](std::int64_t) { cli_flags_[path] = true; }, help);
    } else {
      sub.add_option_function<std::string>("--" + key.flag, [this, path = key.path](const std::string& v) {
        cli_values_[path] = v;
      }, help);
    }
  }
}

Json Schema::resolve() const {
  Json resolved = Json::object();
  for (const auto& key : keys_) set_path(resolved, key.path, key.fallback);

  Json file = Json::object();
  std::vector<std::pair<std::string, Json>> file_leaves;
  if (!config_file_.empty()) {
    const std::string text = read_text(config_file_);
    try {
      file = Json::parse(text);
    } catch (const Json::exception& e) {
      throw UsageError("config file " + config_file_ + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw UsageError("config file " + config_file_ + " must hold a JSON object");
    leaves(file, "", file_leaves);
  }
  auto find_key = [&](const std::string& path) -> const Key* {
    for (const auto& key : keys_)
      if (key.path == path) return &key;
    return nullptr;
  };
  std::map<std::string, Json> from_file;
  for (const auto& [path, value] : file_leaves) {
    const Key* key = find_key(path);
    if (!key) throw UsageError("unknown config key '" + path + "' for command " + command_);
    from_file[path] = check_json(*key, value);
    set_path(resolved, path, from_file[path]);
  }

  for (const auto& key : keys_) {
    std::optional<Json> given;
    if (auto it = cli_values_.find(key.path); it != cli_values_.end()) given = parse_value(key, it->second);
    if (cli_flags_.count(key.path)) given = Json(true);
    if (!given) continue;
    if (auto it = from_file.find(key.path); it != from_file.end() && it->second != *given) {
      throw UsageError("conflicting values for '" + key.path + "': config file has " + describe(it->second) + ", --" +
                       key.flag + " has " + describe(*given));
    }
    set_path(resolved, key.path, *given);
  }

  for (const auto& key : keys_) {
    if (find_path(resolved, key.path)->is_null()) {
      throw UsageError("missing required value '" + key.path + "'" + (key.flag.empty() ? "" : " (set --" + key.flag + ")"));
    }
  }
  return resolved;
}

const Json& at(const Json& config, const std::string& path) {
  const Json* node = find_path(config, path);
  if (!node) throw ContractError("resolved config has no key '" + path + "'");
  return *node;
}

std::filesystem::path prepare_run_dir(const Schema& schema, const Json& resolved) {
  namespace fs = std::filesystem;
  fs::path dir;
  if (schema.run_dir()) {
    dir = *schema.run_dir();
  } else {
    const std::string digest = sha256_hex(schema.command() + "\n" + resolved.dump());
    dir = fs::path(schema.out_root()) / (schema.command() + "-" + digest.substr(0, 12));
  }
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("run directory " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!fs::exists(dir / kManifestName)) {
        throw UsageError("run directory " + dir.string() + " is not empty and was not written by regvit; remove it first");
      }
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
  write_text(dir / "config.resolved.json", resolved.dump(2) + "\n");
  return dir;
}

std::vector<Key> model_keys() {
  const Json toy = Json::parse(config_to_json(toy_model_config()));
  auto k = [&](const std::string& name, Kind kind, const std::string& flag, const std::string& help) {
    return Key{"model." + name, kind, toy.at(name), flag, help};
  };
  return {
      k("image_size", Kind::UInt, "image-size", "Square input size in pixels"),
      k("patch_size", Kind::UInt, "patch-size", "Patch side in pixels"),
      k("channels", Kind::UInt, "", ""),
      k("embed_dim", Kind::UInt, "embed-dim", "Token width d"),
      k("depth", Kind::UInt, "depth", "Encoder blocks"),
      k("heads", Kind::UInt, "heads", "Attention heads"),
      k("mlp_ratio", Kind::Float, "", ""),
      k("n_registers", Kind::UInt, "registers", "Register tokens R"),
      k("n_classes", Kind::UInt, "", ""),
      k("register_pos_embed", Kind::Bool, "reg-posembed", "Give registers position embeddings"),
      k("ln_eps", Kind::Float, "", ""),
  };
}

std::vector<Key> scene_keys() {
  const SceneSpec d;
  return {
      {"data.background", Kind::Choice, to_string(d.background), "background", "Scene background",
       {"uniform", "noise"}},
      {"data.class_rule", Kind::Choice, to_string(d.class_rule), "class-rule", "Property that defines the label",
       {"shape", "background"}},
      {"data.min_size", Kind::UInt, d.min_size, "", ""},
      {"data.max_size", Kind::UInt, d.max_size, "", ""},
      {"data.noise_std", Kind::Float, d.noise_std, "", ""},
  };
}

}  // namespace regvit::cli
