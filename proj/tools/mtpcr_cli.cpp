#include "mtpcr/cli.hpp"

int main(int argc, char** argv) { return mtpcr::cli::run(argc, argv); }
