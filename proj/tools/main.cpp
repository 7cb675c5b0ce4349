#include "cli_core.hpp"

int main(int argc, char** argv) { return vitkd::cli::run_cli(argc, argv); }
