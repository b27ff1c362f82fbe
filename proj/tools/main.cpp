#include "iaqd/cli.hpp"

int main(int argc, char** argv) { return iaqd::run_command(argc, argv); }
