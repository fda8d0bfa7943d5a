#pragma once

#include "packptq/allocator.hpp"
#include "packptq/autodiff.hpp"
#include "packptq/dataset.hpp"
#include "packptq/error.hpp"
#include "packptq/evaluate.hpp"
#include "packptq/importance.hpp"
#include "packptq/model.hpp"
#include "packptq/optim.hpp"
#include "packptq/packer.hpp"
#include "packptq/parallel.hpp"
#include "packptq/pipeline.hpp"
#include "packptq/qnetwork.hpp"
#include "packptq/quant.hpp"
#include "packptq/reconstruct.hpp"
#include "packptq/rng.hpp"
#include "packptq/serialize.hpp"
#include "packptq/tensor.hpp"
#include "packptq/train.hpp"
