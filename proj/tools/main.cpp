#include "eva/cli.hpp"

int main(int argc, char** argv) { return eva::run_cli(argc, argv); }
