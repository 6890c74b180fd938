#include "hetflow/cli.hpp"

int main(int argc, char** argv) { return hetflow::cli::run_cli(argc, argv); }
