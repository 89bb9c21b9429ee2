#include "psqd/cli.hpp"

int main(int argc, char** argv) {
    return psqd::run_cli(argc, argv);
}
