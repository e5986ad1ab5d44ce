#include "amtidin/cli.hpp"

int main(int argc, char** argv) { return amtidin::cli::cli_main(argc, argv); }
