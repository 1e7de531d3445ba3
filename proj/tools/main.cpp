#include "cli.hpp"

int main(int argc, char** argv) { return cloak::cli::run_command(argc, argv); }
