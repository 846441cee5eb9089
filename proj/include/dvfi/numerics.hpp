#pragma once

#include "dvfi/numerics/attention.hpp"
#include "dvfi/numerics/conv.hpp"
#include "dvfi/numerics/ops.hpp"
#include "dvfi/numerics/tensor.hpp"
