#pragma once

#include <stdexcept>
#include <string>

namespace flowconvert {

// Every error raised by the library derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class TrainingError : public NumericError {
public:
    using NumericError::NumericError;
};

class OrderingError : public Error {
public:
    using Error::Error;
};

// Refusal to replace existing artifacts without an explicit override.
class OverwriteError : public OrderingError {
public:
    using OrderingError::OrderingError;
};

class ModeUnsupportedError : public ContractError {
public:
    using ContractError::ContractError;
};

class EmptyInputError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

#define FLOWCONVERT_EXPECT(cond, ErrorType, msg)        \
    do {                                                \
        if (!(cond)) throw ::flowconvert::ErrorType(msg); \
    } while (0)

} // namespace flowconvert
