#include "nasforge/cli.hpp"

int main(int argc, char** argv) { return nasforge::cli::run(argc, argv); }
