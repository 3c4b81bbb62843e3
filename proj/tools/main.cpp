#include <cstdio>

int main() {
  std::puts("softmodnet: subcommands not wired yet");
  return 0;
}
