#pragma once

#include "latentq/kernels.hpp"

namespace latentq::kernels::detail {

double sigmoid(double eta);

/// y*eta - softplus(eta) for an already-clamped eta.
double bernoulli_term(double eta, double y);

extern const KernelTable kScalarTable;

#if defined(LATENTQ_HAVE_AVX2)
extern const KernelTable kAvx2Table;
#endif

}  // namespace latentq::kernels::detail
