#pragma once

// Parameter-initialisation and forward helpers shared by the MoE block and
// the detector. Names follow "<name>.weight", "<name>.bias" and batch-norm
// buffers "<name>.running_mean" / "<name>.running_var".

#include <random>
#include <string>

#include "mdf/params.hpp"

namespace mdf::layers {

void add_conv(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
              std::mt19937_64& rng, bool bias);
void add_pointwise(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::mt19937_64& rng);
void add_linear(ParamStore& store, const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng);
void add_bn(ParamStore& store, const std::string& name, std::size_t channels);

Var conv(Context& ctx, Var x, const std::string& name, std::size_t stride, std::size_t pad, bool bias);
Var pointwise(Context& ctx, Var x, const std::string& name);
Var linear(Context& ctx, Var x, const std::string& name);
Var bn(Context& ctx, Var x, const std::string& name);

/// conv(k, stride, pad=k/2) -> batch norm -> SiLU; conv under "<name>.conv", norm under "<name>.bn".
Var conv_bn_silu(Context& ctx, Var x, const std::string& name, std::size_t stride, std::size_t k = 3);
void add_conv_bn_silu(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::mt19937_64& rng,
                      std::size_t k = 3);

}  // namespace mdf::layers
