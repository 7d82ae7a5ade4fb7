#include <cctype>
#include <string>

// Counts a, e, i, o, u anywhere and y only as the final letter.
int count_vowels(const std::string &s) {
    int n = 0;
    for (char c : s) {
        switch (std::tolower(static_cast<unsigned char>(c))) {
        case 'a': case 'e': case 'i': case 'o': case 'u':
            n++;
        }
    }
    if (!s.empty() && std::tolower(static_cast<unsigned char>(s.back())) == 'y') n++;
    return n;
}
