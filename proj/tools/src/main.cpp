#include "hamobe_cli/cli.hpp"

int main(int argc, char** argv) { return hamobe::cli::run(argc, argv); }
