// SPDX-License-Identifier: Apache-2.0
#include "kwadapt/cli.hpp"

int main(int argc, char **argv) { return kwadapt::cli::run(argc, argv); }
