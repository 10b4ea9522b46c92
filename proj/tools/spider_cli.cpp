#include "spider/harness/cli.hpp"

int main(int argc, char** argv) { return spider::harness::cli_main(argc, argv); }
