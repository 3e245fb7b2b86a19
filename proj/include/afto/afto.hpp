#pragma once

#include "afto/core.hpp"
#include "afto/polytope.hpp"
#include "afto/inner.hpp"
#include "afto/cuts.hpp"
#include "afto/outer.hpp"
#include "afto/harness.hpp"
#include "afto/problems/quadratic.hpp"
#include "afto/problems/mlp.hpp"
#include "afto/problems/dataset.hpp"
#include "afto/problems/robust_hpo.hpp"
#include "afto/config.hpp"
