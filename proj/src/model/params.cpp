#include "tlm/model/params.hpp"

#include "tlm/core/error.hpp"

namespace tlm {

ParamStore ParamStore::zeros_like(const ModelConfig& config) {
  ParamStore p;
  for (const auto& spec : param_specs(config)) {
    const bool is_norm = spec.shape.size() == 1;
    p.set(spec.name, Tensor(spec.shape, is_norm ? 1.0 : 0.0));
  }
  return p;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

void ParamStore::validate(const ModelConfig& config) const {
  const auto specs = param_specs(config);
  for (const auto& spec : specs) {
    auto it = tensors_.find(spec.name);
    if (it == tensors_.end()) throw PlanError("parameter '" + spec.name + "' missing");
    if (it->second.shape() != spec.shape) {
      throw PlanError("parameter '" + spec.name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                      shape_str(spec.shape));
    }
  }
  if (specs.size() != tensors_.size()) {
    for (const auto& [name, _] : tensors_) {
      bool known = false;
      for (const auto& spec : specs) known = known || spec.name == name;
      if (!known) throw PlanError("unexpected parameter '" + name + "'");
    }
  }
}

bool ParamStore::bit_equal(const ParamStore& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first || !a->second.bit_equal(b->second)) return false;
  }
  return true;
}

}  // namespace tlm
