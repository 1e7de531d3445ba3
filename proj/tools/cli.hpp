#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cloak::cli {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Runs one subcommand. args excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

// Standard locations inside a run directory.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path images() const { return root / "images"; }
    std::filesystem::path logs() const { return root / "logs"; }
    std::filesystem::path figures() const { return root / "figures"; }
    std::filesystem::path report() const { return root / "report.csv"; }
};

}  // namespace cloak::cli
