#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pidg/ad/tape.hpp"

namespace pidg::grid {

// Per-axis primes for the spatial hash. The fourth prime is only used by the
// monolithic 4D grid kept for parameter counting.
inline constexpr std::uint32_t kHashPrimes[4] = {1u, 2654435761u, 805459861u, 3674653429u};

struct GridConfig {
  std::size_t dims = 3;
  std::size_t levels = 16;
  // Vertices per axis at the coarsest and finest level. Intermediate levels
  // grow geometrically.
  std::vector<double> base_resolution{16, 16, 16};
  std::vector<double> max_resolution{2048, 2048, 2048};
  unsigned table_size_log2 = 19;
  std::size_t feature_dim = 2;
  double init_range = 1e-4;
};

struct GridLevel {
  std::vector<std::uint32_t> resolution;  // vertices per axis
  std::size_t offset = 0;                 // first row of this level in the table
  std::size_t entries = 0;
  bool dense = false;
};

enum class LevelReduce { kConcat, kSum };

// Multiresolution feature grid over [0,1]^dims. Every level is stored in one
// learnable table of shape {total entries, feature_dim}; coarse levels whose
// vertex count fits the table size are indexed densely, finer ones through the
// XOR hash.
class MultiResGrid {
 public:
  MultiResGrid(std::string name, GridConfig config, std::mt19937_64& rng);

  const GridConfig& config() const { return config_; }
  std::size_t dims() const { return config_.dims; }
  std::size_t levels() const { return levels_.size(); }
  std::size_t feature_dim() const { return config_.feature_dim; }
  const std::vector<GridLevel>& level_info() const { return levels_; }
  std::size_t entry_count() const { return table_.value.rows(); }
  std::size_t output_dim(LevelReduce reduce) const {
    return reduce == LevelReduce::kConcat ? levels() * feature_dim() : feature_dim();
  }

  ad::Parameter& table() { return table_; }
  const ad::Parameter& table() const { return table_; }

  // Table row for an integer vertex on a level.
  std::size_t vertex_row(std::size_t level, std::span<const std::uint32_t> vertex) const;

  // Interpolated features for one point, without a tape.
  std::vector<double> query(std::span<const double> point, LevelReduce reduce) const;

 private:
  GridConfig config_;
  std::vector<GridLevel> levels_;
  ad::Parameter table_;
};

// Vertices per axis on `level` of `levels`, growing geometrically from base to max.
std::uint32_t level_resolution(double base, double max, std::size_t levels,
                                            std::size_t level);

// Hash of an integer vertex, masked to a power-of-two table size.
std::uint32_t hash_vertex(std::span<const std::uint32_t> vertex, std::uint32_t table_size);

// Interpolated grid features. `table` is the grid's table bound on the tape
// that also owns `coords` (M x dims, every entry in [0,1]). Differentiable with
// respect to the table and, when `coords` takes gradients, the coordinates.
ad::Var encode(const MultiResGrid& grid, const ad::Var& table, const ad::Var& coords,
               LevelReduce reduce);

// Derivative of encode() along one coordinate axis (a piecewise-constant
// slope). Differentiable with respect to the table only.
ad::Var encode_slope(const MultiResGrid& grid, const ad::Var& table, const ad::Tensor& coords,
                     std::size_t axis, LevelReduce reduce);

// Entries needed to store a dense grid of n vertices per axis: four 3D grids
// over (xyz, xyt, yzt, xzt) versus one 4D grid.
std::size_t decomposed_entry_count(std::size_t n);
std::size_t monolithic_entry_count(std::size_t n);

}  // namespace pidg::grid
