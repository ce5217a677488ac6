#include "cli.hpp"

#include <algorithm>

#include "commands.hpp"
#include "regvit/errors.hpp"
#include "regvit/report.hpp"

namespace regvit::cli {

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

int report(std::ostream& err, const std::string& kind, const std::string& message) {
  err << "error: " << kind << ": " << one_line(message) << "\n";
  return kind == "usage" ? 2 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<Command> commands = make_commands();
  CLI::App app{"regvit: register-token ViT lab"};
  app.name("regvit");
  app.require_subcommand(1);
  std::vector<CLI::App*> subs;
  for (auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.description);
    c.schema.attach(*sub);
    subs.push_back(sub);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return report(err, "usage", e.what());
  } catch (const Error& e) {
    return report(err, e.kind(), e.what());
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    Command& cmd = commands[i];
    try {
      const Json resolved = cmd.schema.resolve();
      const std::filesystem::path dir = prepare_run_dir(cmd.schema, resolved);
      try {
        cmd.run(resolved, dir, out);
      } catch (...) {
        write_manifest(dir);
        throw;
      }
      write_manifest(dir);
      out << dir.generic_string() << "\n";
      return 0;
    } catch (const Error& e) {
      return report(err, e.kind(), e.what());
    } catch (const Json::exception& e) {
      return report(err, "data", e.what());
    } catch (const std::filesystem::filesystem_error& e) {
      return report(err, "io", e.what());
    } catch (const std::exception& e) {
      return report(err, "internal", e.what());
    }
  }
  return report(err, "usage", "no command given");
}

}  // namespace regvit::cli
