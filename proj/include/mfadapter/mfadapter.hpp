#pragma once

#include "mfadapter/errors.hpp"
#include "mfadapter/tensor.hpp"
#include "mfadapter/numerics.hpp"
#include "mfadapter/random.hpp"
#include "mfadapter/meta_feature.hpp"
#include "mfadapter/binary_io.hpp"
#include "mfadapter/bundle.hpp"
#include "mfadapter/dataio.hpp"
#include "mfadapter/cache_model.hpp"
#include "mfadapter/fusion.hpp"
#include "mfadapter/adapter.hpp"
#include "mfadapter/training.hpp"
#include "mfadapter/evaluate.hpp"
