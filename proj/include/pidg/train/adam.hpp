#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pidg/ad/tape.hpp"
#include "pidg/scene/gaussian_cloud.hpp"

namespace pidg::train {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments and step count of one parameter tensor.
struct AdamState {
  ad::Tensor m;
  ad::Tensor v;
  std::uint64_t step = 0;
};

// Bias-corrected Adam update of `value` in place. Rows whose `row_mask` entry
// is false are left untouched (value and moments); the step count still advances.
void adam_step(ad::Tensor& value, const ad::Tensor& grad, AdamState& state, double rate,
               const AdamSettings& settings = {}, const std::vector<bool>* row_mask = nullptr);

// Adam over named parameter groups with per-group learning rates.
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  void add(ad::Parameter* param, double rate);
  void set_rate(const ad::Parameter* param, double rate);
  double rate(const ad::Parameter* param) const;
  // Applies one update to every parameter that has a gradient, then zeroes it.
  void step();
  void set_row_mask(const ad::Parameter* param, std::vector<bool> mask);
  void clear_row_masks();
  // Carries row state through a densify/prune remap; fresh rows start at zero.
  void remap(const ad::Parameter* param, const scene::RowRemap& remap);
  // Drops state whose shape no longer matches the parameter.
  void reconcile();

  struct Entry {
    ad::Parameter* param;
    double rate;
    AdamState state;
    std::vector<bool> mask;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  const AdamSettings& settings() const { return settings_; }

 private:
  Entry& find(const ad::Parameter* param);
  const Entry& find(const ad::Parameter* param) const;

  AdamSettings settings_;
  std::vector<Entry> entries_;
};

}  // namespace pidg::train
