#include <string>
#include <vector>

#include "ltn/cli/cli.hpp"

int main(int argc, char** argv) { return ltn::cli::run(std::vector<std::string>(argv, argv + argc)); }
