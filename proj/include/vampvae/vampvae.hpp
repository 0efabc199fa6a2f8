#pragma once

#include "vampvae/checkpoint.hpp"
#include "vampvae/datasets.hpp"
#include "vampvae/distributions.hpp"
#include "vampvae/errors.hpp"
#include "vampvae/evaluation.hpp"
#include "vampvae/image.hpp"
#include "vampvae/models.hpp"
#include "vampvae/nn.hpp"
#include "vampvae/priors.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"
#include "vampvae/training.hpp"
