#include "cli.hpp"

int main(int argc, char** argv) { return dscm::cli::run(argc, argv); }
