#pragma once

#include "awe/affinity.hpp"
#include "awe/data.hpp"
#include "awe/errors.hpp"
#include "awe/eval.hpp"
#include "awe/linear_embedding.hpp"
#include "awe/pipeline.hpp"
