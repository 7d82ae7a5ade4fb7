#include <vector>

std::vector<int> sort_even(std::vector<int> l);

int main() {
    if (sort_even({1, 2, 3}) != std::vector<int>{1, 2, 3}) return 1;
    if (sort_even({5, 6, 3, 4}) != std::vector<int>{3, 6, 5, 4}) return 1;
    if (sort_even({5, 3, -5, 2, -3, 3, 9, 0, 123, 1, -10}) !=
        std::vector<int>{-10, 3, -5, 2, -3, 3, 5, 0, 9, 1, 123})
        return 1;
    return 0;
}
