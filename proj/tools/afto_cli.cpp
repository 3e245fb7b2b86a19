#include "afto/cli.hpp"

int main(int argc, char** argv) { return afto::cli::cli_main(argc, argv); }
