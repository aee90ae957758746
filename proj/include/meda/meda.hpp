#pragma once

#include "meda/allocator.hpp"
#include "meda/compressor.hpp"
#include "meda/entropy.hpp"
#include "meda/harness.hpp"
#include "meda/kvcache.hpp"
#include "meda/matrix.hpp"
#include "meda/model.hpp"
#include "meda/trace.hpp"
#include "meda/types.hpp"
