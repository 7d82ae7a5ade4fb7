#include <string>

bool is_palindrome(const std::string &text);

int main() {
    if (!is_palindrome("")) return 1;
    if (!is_palindrome("aba")) return 1;
    if (!is_palindrome("zbcdcbz")) return 1;
    if (is_palindrome("xywyz")) return 1;
    if (is_palindrome("ab")) return 1;
    return 0;
}
