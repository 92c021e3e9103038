#pragma once

#include "fedstyle/checkpoint.hpp"
#include "fedstyle/config.hpp"
#include "fedstyle/domain.hpp"
#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/eval.hpp"
#include "fedstyle/federation.hpp"
#include "fedstyle/losses.hpp"
#include "fedstyle/memory.hpp"
#include "fedstyle/optimizer.hpp"
#include "fedstyle/tensor.hpp"
