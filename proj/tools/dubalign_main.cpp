#include <string>
#include <vector>

#include "dubalign/cli.hpp"

int main(int argc, char** argv) {
    return dubalign::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
