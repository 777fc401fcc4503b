#include <vector>

#include "hipt/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return hipt::cli::run(args);
}
