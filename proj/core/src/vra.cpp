#include "spt/vra.hpp"

#include "spt/sdt.hpp"

namespace spt {

void VraConfig::validate() const {
  if (alpha < 0.0) fail(ErrorKind::config, "vra: alpha must be >= 0");
}

RelationMatrix compute_relation(const Tensor& e_img, double alpha) {
  if (e_img.rank() != 2) fail(ErrorKind::dimension, "compute_relation: expected (n,d) tokens");
  const int64_t n = e_img.dim(0);
  const int64_t d = e_img.dim(1);
  if (n < 2) fail(ErrorKind::degenerate, "compute_relation: need at least two regions");
  if (alpha < 0.0) fail(ErrorKind::config, "compute_relation: alpha must be >= 0");

  // Cosine similarity via row normalization. The tiny additive term keeps
  // zero rows at a zero unit vector (cosine 0 by convention) and perturbs
  // non-zero rows far below the 1e-9 invariant tolerances.
  Tensor sq = sum_axis(mul(e_img, e_img), 1);          // (n,1)
  Tensor norm = sqrt_elem(add_scalar(sq, 1e-24));      // (n,1)
  Tensor unit = divide(e_img, norm);                   // (n,d)
  Tensor similarity = matmul(unit, unit, false, true); // (n,n)

  Tensor masked = add_neg_inf_diag(similarity);
  RelationMatrix rel;
  rel.alpha = alpha;
  rel.d = d;
  rel.a = softmax(masked, 1);
  Tensor gate = ge_mask(rel.a, alpha / static_cast<double>(d));
  rel.a_star = mul(rel.a, gate);
  return rel;
}

Tensor apply_relation(const RelationMatrix& rel, const Tensor& t_img, const Tensor& beta,
                      bool use_raw) {
  const Tensor& matrix = use_raw ? rel.a : rel.a_star;
  Tensor relation_features = matmul(matrix, t_img);
  return add(t_img, mul(beta, relation_features));
}

void configure_placement(SptModel& model, VraPlacement placement) {
  model.vra.placement = placement;
  const bool tw1 = placement == VraPlacement::tw1 || placement == VraPlacement::both;
  const bool tw2 = placement == VraPlacement::tw2 || placement == VraPlacement::both;
  const int64_t d = model.cfg.decoder_dim;
  Tape* tape = model.tape.get();

  auto configure = [&](MaskDecoder& dec) {
    if (tw1) {
      Tensor beta = Tensor::zeros({1, d});
      beta.set_tape(tape);
      beta.set_requires_grad(true);
      dec.vra_beta_tw1 = beta;
    } else {
      dec.vra_beta_tw1 = Tensor();
    }
    if (tw2) {
      Tensor beta = Tensor::zeros({1, d});
      beta.set_tape(tape);
      beta.set_requires_grad(true);
      dec.vra_beta_tw2 = beta;
    } else {
      dec.vra_beta_tw2 = Tensor();
    }
  };
  configure(model.refine_decoder);
  if (model.draft_decoder) configure(*model.draft_decoder);
}

VraPlacement vra_placement_from_string(const std::string& s) {
  if (s == "none") return VraPlacement::none;
  if (s == "tw1") return VraPlacement::tw1;
  if (s == "tw2") return VraPlacement::tw2;
  if (s == "both") return VraPlacement::both;
  fail(ErrorKind::config, "vra: unknown placement '" + s + "' (none|tw1|tw2|both)");
}

std::string to_string(VraPlacement placement) {
  switch (placement) {
    case VraPlacement::none: return "none";
    case VraPlacement::tw1: return "tw1";
    case VraPlacement::tw2: return "tw2";
    case VraPlacement::both: return "both";
  }
  return "none";
}

}  // namespace spt
