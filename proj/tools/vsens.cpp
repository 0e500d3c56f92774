#include <vector>
#include <string>

#include "vsens/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return vsens::cli::dispatch(args);
}
