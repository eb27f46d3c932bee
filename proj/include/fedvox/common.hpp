#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedvox {

// Numeric buffers are kept at a fixed 64-byte alignment so vectorized
// reductions split lanes identically no matter where the heap places them;
// reruns inside one process then stay bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string cat(const Parts&... parts) {
  std::ostringstream os;
  detail::cat_into(os, parts...);
  return os.str();
}

// Config/contract violations surface as std::invalid_argument (CLI exit 2),
// everything else as std::runtime_error (CLI exit 3).
[[noreturn]] inline void fail_config(std::string msg) { throw std::invalid_argument(std::move(msg)); }
[[noreturn]] inline void fail_runtime(std::string msg) { throw std::runtime_error(std::move(msg)); }

}  // namespace fedvox

#define FV_CHECK(cond, ...)                              \
  do {                                                   \
    if (!(cond)) ::fedvox::fail_config(::fedvox::cat(__VA_ARGS__)); \
  } while (0)

#define FV_RUNTIME_CHECK(cond, ...)                       \
  do {                                                    \
    if (!(cond)) ::fedvox::fail_runtime(::fedvox::cat(__VA_ARGS__)); \
  } while (0)
