#include "fdm/cli/dispatch.hpp"

int main(int argc, char** argv) { return fdm::cli::dispatch(argc, argv); }
