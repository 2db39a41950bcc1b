#include "gausscount/cli.hpp"

int main(int argc, char** argv) {
  return gausscount::run_cli(argc, argv);
}
