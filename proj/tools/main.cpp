#include <cstdio>

int main() {
  std::puts("usseg: command-line interface under construction");
  return 0;
}
