#include "km/cli.hpp"

int main(int argc, char** argv) { return km::run_cli(argc, argv); }
