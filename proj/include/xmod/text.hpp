#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xmod {

// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);

double parse_double(std::string_view text, std::string_view what);
long long parse_int(std::string_view text, std::string_view what);

std::vector<std::string> split(std::string_view text, char sep);

// Parses `k1=v1,k2=v2` with numeric values.
std::map<std::string, double> parse_key_values(std::string_view text, std::string_view what);

}  // namespace xmod
