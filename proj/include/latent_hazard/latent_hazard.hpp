#pragma once

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/factor_model.hpp"
#include "latent_hazard/imputation.hpp"
#include "latent_hazard/moral_hazard.hpp"
#include "latent_hazard/parallel.hpp"
#include "latent_hazard/pipeline.hpp"
#include "latent_hazard/random.hpp"
#include "latent_hazard/regression.hpp"
#include "latent_hazard/synthetic.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

inline constexpr const char* version = "0.1.0";

}  // namespace lh
