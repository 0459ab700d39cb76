#pragma once

#include <string>

#include "stylebrush/io/container.hpp"
#include "stylebrush/nn/layers.hpp"

namespace stylebrush::nn {

template <class T>
void store_params(io::Container& c, const std::string& prefix, const ParamList<T>& params) {
    for (const auto& p : params) c.put(prefix + p.name, p.var.value());
}

/// Overwrites every parameter in place; shapes must match exactly.
template <class T>
void load_params(const io::Container& c, const std::string& prefix, ParamList<T>& params) {
    for (auto& p : params) {
        Tensor<T> t = c.get<T>(prefix + p.name);
        require(t.shape() == p.var.shape(), ErrorKind::checkpoint,
                "tensor '" + prefix + p.name + "' has shape " + to_string(t.shape()) + ", architecture expects " +
                    to_string(p.var.shape()));
        p.var.mutable_value() = std::move(t);
    }
}

}  // namespace stylebrush::nn
