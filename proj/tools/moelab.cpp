// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "moelab/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return moelab::cli_main(args, std::cout, std::cerr);
}
