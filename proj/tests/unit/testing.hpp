#pragma once

#include <torch/torch.h>

// c10's glog-style macros collide with doctest's assertion names.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include <doctest.h>

#include "support.hpp"
