#include "dsain/cli.hpp"

int main(int argc, char** argv) { return dsain::cli_main(argc, argv); }
