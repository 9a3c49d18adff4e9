// SPDX-License-Identifier: Apache-2.0
#include "icenet/cli.hpp"

int main(int argc, char** argv) { return icenet::run_cli(argc, argv); }
