#include "xprotonet/cli.hpp"

int main(int argc, char** argv) { return xprotonet::cli_main(argc, argv); }
