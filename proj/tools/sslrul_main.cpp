#include "sslrul/cli.hpp"

int main(int argc, char** argv) { return sslrul::run_cli(argc, argv); }
