#include "sitt/cli.hpp"

int main(int argc, char** argv) { return sitt::run_cli(argc, argv); }
