#include <string>

bool is_palindrome(const std::string &text) {
    if (text.empty()) return true;
    std::size_t i = 0, j = text.size() - 1;
    while (i < j) {
        if (text[i] != text[j]) return false;
        i++;
        j--;
    }
    return true;
}
