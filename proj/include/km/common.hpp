#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace km {

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// wrong rank / extent mismatch
struct ShapeError : Error {
    using Error::Error;
};
// numeric domain violations (log of non-positive, division by zero, ...)
struct DomainError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

template <class... A>
std::string cat(A&&... a) {
    std::ostringstream o;
    (o << ... << a);
    return o.str();
}

}  // namespace km

#define KM_REQUIRE(cond, Err, ...)                    \
    do {                                              \
        if (!(cond)) throw Err(::km::cat(__VA_ARGS__)); \
    } while (0)
