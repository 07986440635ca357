#pragma once

#include <string>

namespace rwdre {

// Shortest decimal string that parses back to exactly the same double.
std::string format_double(double x);

// Writes through a sibling temp file plus rename, so a reader never sees a
// partially written artifact. Throws UsageError on any filesystem failure.
void write_file_atomic(const std::string& path, const std::string& content);

// Whole file as a string; UsageError when unreadable.
std::string read_file(const std::string& path);

}  // namespace rwdre
