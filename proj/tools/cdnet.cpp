#include "cdnet/cli.hpp"

int main(int argc, char** argv) { return cdnet::cli_dispatch(argc, argv); }
