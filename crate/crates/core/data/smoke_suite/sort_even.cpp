#include <algorithm>
#include <vector>

// Sorts the values at even indices, leaving odd indices in place.
std::vector<int> sort_even(std::vector<int> l) {
    std::vector<int> even;
    for (std::size_t i = 0; i < l.size(); i += 2) even.push_back(l[i]);
    std::sort(even.begin(), even.end());
    for (std::size_t i = 0; i < l.size(); i += 2) l[i] = even[i / 2];
    return l;
}
