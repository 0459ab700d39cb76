#include "stylebrush/cli.hpp"

int main(int argc, char** argv) { return stylebrush::cli::dispatch(argc, argv); }
