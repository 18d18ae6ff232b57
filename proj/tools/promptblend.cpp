#include "promptblend/cli.hpp"

int main(int argc, char** argv) { return promptblend::run_cli(argc, argv); }
