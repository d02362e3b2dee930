#include "circles/cli.hpp"

int main(int argc, char** argv) { return circles::run_cli(argc, argv); }
