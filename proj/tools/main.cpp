#include "fspool/cli.hpp"

int main(int argc, char** argv) { return fspool::run_cli(argc, argv); }
