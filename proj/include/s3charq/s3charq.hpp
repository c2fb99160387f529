#pragma once

#include "s3charq/adam.hpp"
#include "s3charq/agent.hpp"
#include "s3charq/autodiff.hpp"
#include "s3charq/channel.hpp"
#include "s3charq/checkpoint.hpp"
#include "s3charq/codec.hpp"
#include "s3charq/config.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/evaluation.hpp"
#include "s3charq/frame.hpp"
#include "s3charq/grad_check.hpp"
#include "s3charq/harq.hpp"
#include "s3charq/mlp.hpp"
#include "s3charq/pipeline.hpp"
#include "s3charq/reward.hpp"
#include "s3charq/rng.hpp"
#include "s3charq/source_data.hpp"
#include "s3charq/training.hpp"
