#include <cstdio>

int main() {
  std::printf("dualse: CLI not wired up yet\n");
  return 1;
}
