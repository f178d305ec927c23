#include "cli.hpp"

int main(int argc, char** argv) { return fusereg::cli::run(argc, argv); }
