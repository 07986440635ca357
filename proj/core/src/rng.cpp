#include "rwdre/rng.hpp"

// Header-only in practice; this translation unit anchors the component in the
// library and keeps a place for any future non-inline additions.

namespace rwdre {}
