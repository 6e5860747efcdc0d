#include "dsmstcn/cli.hpp"

int main(int argc, char** argv) { return dsmstcn::cli::run(argc, argv); }
