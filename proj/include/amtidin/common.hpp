#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

namespace amtidin {

// Errors caused by user-supplied configuration or arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed, truncated or corrupted files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerical failure (zero power, non-finite values, degenerate matrices).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task : int { ID = 0, MI = 1, II = 2 };
inline constexpr int kNumTasks = 3;
inline constexpr std::array<Task, 3> kAllTasks{Task::ID, Task::MI, Task::II};

inline constexpr int index(Task t) { return static_cast<int>(t); }
std::string_view task_name(Task t);
Task task_from_name(std::string_view name);

// Unordered task pairs (t < i), one per discriminator.
inline constexpr std::array<std::array<int, 2>, 3> kTaskPairs{{{0, 1}, {0, 2}, {1, 2}}};
// Index into kTaskPairs for t != i.
int pair_index(int t, int i);

// splitmix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based seed derivation: the result depends only on the inputs, never on
// call order.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(base);
  for (auto p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

std::uint64_t hash_string(std::string_view s);

}  // namespace amtidin
