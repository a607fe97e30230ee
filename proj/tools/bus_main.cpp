#include "bus/cli.hpp"

int main(int argc, char** argv) {
    return bus::run_cli(argc, argv);
}
