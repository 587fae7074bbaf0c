// SPDX-License-Identifier: Apache-2.0

#include "sts/cli.hpp"

int main(int argc, char** argv) { return sts::cli::run_cli(argc, argv); }
