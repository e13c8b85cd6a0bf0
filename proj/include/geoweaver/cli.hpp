// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

namespace geoweaver {

// Entry point behind the `geoweaver` executable. Exit codes: 0 success,
// 2 config/format error, 3 numeric/training failure (including failed
// checks), 1 anything else.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace geoweaver
