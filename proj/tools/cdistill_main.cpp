// SPDX-License-Identifier: Apache-2.0
#include "cdistill/cli.hpp"

int main(int argc, char** argv) { return cdistill::run_cli(argc, argv); }
