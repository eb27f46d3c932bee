#include "fedvox/cli.hpp"

int main(int argc, char** argv) { return fedvox::cli_main(argc, argv); }
