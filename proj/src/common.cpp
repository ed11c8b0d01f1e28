#include "ddrvlad/common.h"

#include <cmath>

namespace ddrvlad {

Protocol parse_protocol(const std::string& name) {
  if (name == "exclude_query") return Protocol::exclude_query;
  if (name == "include_query") return Protocol::include_query;
  throw Error("unknown protocol '" + name + "' (expected exclude_query or include_query)");
}

std::string to_string(Protocol p) {
  return p == Protocol::exclude_query ? "exclude_query" : "include_query";
}

double squared_l2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace ddrvlad
