#pragma once

#include <stdexcept>

namespace cotforge {

// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace cotforge
