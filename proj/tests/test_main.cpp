#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "lamp/tensor.hpp"

int main(int argc, char** argv) {
  lamp::keep_heap_memory();
  return doctest::Context(argc, argv).run();
}
