#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "tlm/core/tensor.hpp"
#include "tlm/model/config.hpp"

namespace tlm {

// Named weights of one model. Ordered by name so iteration is deterministic.
class ParamStore {
 public:
  ParamStore() = default;

  // All tensors the config requires, zero-filled (norm scales set to one).
  static ParamStore zeros_like(const ModelConfig& config);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  std::size_t size() const { return tensors_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  // Throws PlanError naming the first missing, extra, or misshaped tensor.
  void validate(const ModelConfig& config) const;

  bool bit_equal(const ParamStore& other) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace tlm
