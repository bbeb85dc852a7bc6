#include <cstdio>

int main() {
  std::puts("framelet CLI placeholder");
  return 0;
}
