long fib(int n);

int main() {
    const long expected[] = {0, 1, 1, 2, 3, 5, 8, 13, 21, 34, 55};
    for (int i = 0; i <= 10; i++)
        if (fib(i) != expected[i]) return 1;
    if (fib(50) != 12586269025L) return 1;
    return 0;
}
