#include "keyread/cli/app.hpp"

int main(int argc, char** argv) { return keyread::cli::run(argc, argv); }
