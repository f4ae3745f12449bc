#include <string>
#include <vector>

#include "layoutforge/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return layoutforge::cli::run(args);
}
