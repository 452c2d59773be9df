#include "voxadapt/cli.hpp"

int main(int argc, char** argv) { return voxadapt::cli_main(argc, argv); }
