#pragma once

#include "lengthlab/analysis.hpp"
#include "lengthlab/corpus.hpp"
#include "lengthlab/error.hpp"
#include "lengthlab/nnet/checkpoint.hpp"
#include "lengthlab/nnet/gradcheck.hpp"
#include "lengthlab/nnet/lm.hpp"
#include "lengthlab/pipeline.hpp"
#include "lengthlab/ppolab.hpp"
#include "lengthlab/rmlab.hpp"
#include "lengthlab/rng.hpp"
#include "lengthlab/sequence.hpp"
#include "lengthlab/vocab.hpp"
