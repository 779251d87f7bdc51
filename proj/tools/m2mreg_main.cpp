#include <iostream>
#include <vector>

#include "m2m/cli/cli.h"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return m2m::run_cli(args, std::cout, std::cerr);
}
