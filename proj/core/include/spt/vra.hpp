#pragma once

#include <cstdint>
#include <string>

#include "spt/tensor.hpp"

namespace spt {

struct SptModel;

enum class VraPlacement { none, tw1, tw2, both };

struct VraConfig {
  double alpha = 0.25;
  VraPlacement placement = VraPlacement::both;
  bool use_raw_relation = false;  // aggregate with the un-thresholded matrix

  void validate() const;
};

// Inter-region relation matrix derived from the display-phase image tokens.
// a is row-stochastic with an exactly-zero diagonal; a_star keeps only the
// entries >= alpha/d.
struct RelationMatrix {
  Tensor a;
  Tensor a_star;
  double alpha = 0.0;
  int64_t d = 0;
};

// Cosine similarities between token rows, diagonal masked to -inf, row
// softmax, then the alpha/d threshold. Computed once per image and reused by
// both decoder passes. Requires n >= 2 rows.
RelationMatrix compute_relation(const Tensor& e_img, double alpha);

// t + beta (.)channel (A* t). With use_raw the un-thresholded matrix is used.
Tensor apply_relation(const RelationMatrix& rel, const Tensor& t_img, const Tensor& beta,
                      bool use_raw);

// Create (or drop) the per-site learnable scale vectors on every decoder the
// model owns. Each site starts at zero so the adapter begins as the identity.
void configure_placement(SptModel& model, VraPlacement placement);

VraPlacement vra_placement_from_string(const std::string& s);
std::string to_string(VraPlacement placement);

}  // namespace spt
