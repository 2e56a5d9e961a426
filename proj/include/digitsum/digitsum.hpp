#pragma once

#include "digitsum/assignment.hpp"
#include "digitsum/classifier.hpp"
#include "digitsum/clustering.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/embedding.hpp"
#include "digitsum/error.hpp"
#include "digitsum/evaluation.hpp"
#include "digitsum/inference.hpp"
#include "digitsum/pipeline.hpp"
#include "digitsum/random.hpp"
#include "digitsum/tensor_io.hpp"
