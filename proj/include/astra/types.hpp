#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace astra {

// Row-major so that a sequence position (or a visual slot) is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Reserved vocabulary of the toy model. Everything at or above kFirstFreeToken is unused filler.
namespace tok {
inline constexpr TokenId PAD = 0;
inline constexpr TokenId BOS = 1;
inline constexpr TokenId EOS = 2;
inline constexpr TokenId SURE = 3;
inline constexpr TokenId REFUSE = 4;
inline constexpr TokenId Q = 5;    // "what is in the image?"
inline constexpr TokenId USR = 6;  // start of the user turn
inline constexpr TokenId AST = 7;  // start of the assistant turn
inline constexpr TokenId H0 = 8;   // harmful instructions H0..H3
inline constexpr TokenId B0 = 12;  // harmless requests B0..B3, answered with SURE
inline constexpr TokenId A0 = 16;  // answer tokens A0..A7
inline constexpr std::uint32_t kNumHarmful = 4;
inline constexpr std::uint32_t kNumHarmless = 4;
inline constexpr std::uint32_t kNumAnswers = 8;
inline constexpr TokenId kFirstFreeToken = A0 + kNumAnswers;
}  // namespace tok

/// Raised when a caller violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace astra
