#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rstn {

// All recoverable failures surface as rstn::Error; the CLI turns them into
// an error JSON and a nonzero exit status.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

enum class Viewpoint { coronal = 0, sagittal = 1, axial = 2 };

inline const char* viewpoint_name(Viewpoint v) {
  switch (v) {
    case Viewpoint::coronal: return "coronal";
    case Viewpoint::sagittal: return "sagittal";
    default: return "axial";
  }
}

Viewpoint viewpoint_from_name(const std::string& name);

inline constexpr Viewpoint kViewpoints[3] = {Viewpoint::coronal,
                                             Viewpoint::sagittal,
                                             Viewpoint::axial};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must
// write to disjoint state; results are deterministic regardless of the
// worker count. Exceptions are captured and rethrown on the caller.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

int default_thread_count();

}  // namespace rstn
