#include <cstdio>
int main(int, char**) { std::puts("cli tests placeholder"); return 0; }
