#include "layers.hpp"

#include "mdf/ops.hpp"

namespace mdf::layers {

void add_conv(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
              std::mt19937_64& rng, bool bias) {
    store.params.insert_or_assign(name + ".weight", kaiming_uniform({cout, cin, k, k}, cin * k * k, rng));
    if (bias) store.params.insert_or_assign(name + ".bias", Tensor({cout}, 0.0));
}

void add_pointwise(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::mt19937_64& rng) {
    store.params.insert_or_assign(name + ".weight", kaiming_uniform({cout, cin}, cin, rng));
    store.params.insert_or_assign(name + ".bias", Tensor({cout}, 0.0));
}

void add_linear(ParamStore& store, const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng) {
    store.params.insert_or_assign(name + ".weight", kaiming_uniform({out, in}, in, rng));
    store.params.insert_or_assign(name + ".bias", Tensor({out}, 0.0));
}

void add_bn(ParamStore& store, const std::string& name, std::size_t channels) {
    store.params.insert_or_assign(name + ".weight", Tensor({channels}, 1.0));
    store.params.insert_or_assign(name + ".bias", Tensor({channels}, 0.0));
    store.buffers.insert_or_assign(name + ".running_mean", Tensor({channels}, 0.0));
    store.buffers.insert_or_assign(name + ".running_var", Tensor({channels}, 1.0));
}

Var conv(Context& ctx, Var x, const std::string& name, std::size_t stride, std::size_t pad, bool bias) {
    std::optional<Var> b;
    if (bias) b = ctx.param(name + ".bias");
    return ops::conv2d(ctx.graph(), x, ctx.param(name + ".weight"), b, stride, pad);
}

Var pointwise(Context& ctx, Var x, const std::string& name) {
    return ops::pointwise_conv(ctx.graph(), x, ctx.param(name + ".weight"), ctx.param(name + ".bias"));
}

Var linear(Context& ctx, Var x, const std::string& name) {
    return ops::linear(ctx.graph(), x, ctx.param(name + ".weight"), ctx.param(name + ".bias"));
}

Var bn(Context& ctx, Var x, const std::string& name) {
    return ops::batch_norm2d(ctx.graph(), x, ctx.param(name + ".weight"), ctx.param(name + ".bias"), ctx.bn_buffers(name),
                             ctx.bn_options());
}

Var conv_bn_silu(Context& ctx, Var x, const std::string& name, std::size_t stride, std::size_t k) {
    Var y = conv(ctx, x, name + ".conv", stride, k / 2, false);
    return ops::silu(ctx.graph(), bn(ctx, y, name + ".bn"));
}

void add_conv_bn_silu(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::mt19937_64& rng,
                      std::size_t k) {
    add_conv(store, name + ".conv", cout, cin, k, rng, false);
    add_bn(store, name + ".bn", cout);
}

}  // namespace mdf::layers
