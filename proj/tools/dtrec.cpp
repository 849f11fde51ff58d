#include "dtrec/cli/commands.hpp"

int main(int argc, char** argv) { return dtrec::cli::run(argc, argv); }
