#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace regvit::cli {

struct Command {
  std::string name;
  std::string description;
  Schema schema;
  // Resolved config, prepared run directory, stdout.
  std::function<void(const Json&, const std::filesystem::path&, std::ostream&)> run;
};

std::vector<Command> make_commands();

}  // namespace regvit::cli
