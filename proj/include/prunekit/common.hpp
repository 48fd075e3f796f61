#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace prunekit {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: UsageError -> 1, NumericError -> 2, EquivalenceError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct UsageError : Error {
    using Error::Error;
};

struct EquivalenceError : Error {
    using Error::Error;
};

using Rng = std::mt19937_64;

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline long numel_of(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) n *= d;
    return n;
}

// Portable serialization of a mt19937_64 stream via its textual state.
inline std::string rng_to_string(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline Rng rng_from_string(const std::string& s) {
    Rng rng;
    std::istringstream is(s);
    is >> rng;
    if (!is) throw UsageError("invalid RNG state string");
    return rng;
}

}  // namespace prunekit
