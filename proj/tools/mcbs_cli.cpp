#include "mcbs/cli.hpp"

int main(int argc, char** argv) { return mcbs::cli::run(argc, argv); }
