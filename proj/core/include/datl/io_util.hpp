#pragma once

#include <string>
#include <vector>

namespace datl {

/// Shortest decimal form that parses back to the identical double
/// (std::to_chars), so emitted CSV/JSON numbers round-trip exactly.
std::string format_double(double value);

double parse_double(const std::string& text, const std::string& context);
long parse_long(const std::string& text, const std::string& context);

/// Comma split with trailing-CR trim; no quoting support.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace datl
