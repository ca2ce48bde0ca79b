#include <cstdio>

int main() {
  std::puts("vitgan-lab: placeholder");
  return 0;
}
