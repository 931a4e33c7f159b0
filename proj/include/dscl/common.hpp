#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dscl {

using Dims = std::vector<int64_t>;

inline int64_t numel_of(const Dims& d) {
    int64_t n = 1;
    for (int64_t v : d) n *= v;
    return n;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d.size(); ++i) os << (i ? "x" : "") << d[i];
    os << "]";
    return os.str();
}

// Error taxonomy. The CLI maps these to exit codes (config=2, data=3, numerics=4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };
struct NumericsError : Error { using Error::Error; };
struct TapeError : Error { using Error::Error; };
struct OptimError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct EvalError : Error { using Error::Error; };
struct MetricError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ReportError : Error { using Error::Error; };

}  // namespace dscl
