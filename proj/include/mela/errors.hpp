#pragma once

#include <stdexcept>
#include <string>

namespace mela {

// Exit-code classes used by the CLI: validation (1), numerical (2),
// pipeline contract (3).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mela
