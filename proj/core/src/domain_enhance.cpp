#include "ucast/domain_enhance.hpp"

#include <stdexcept>

namespace ucast {

namespace {

// E[log p] over a probability map
Variable mean_log(const Variable& p) { return mean_all(log(p)); }

// E[log(1-p)]
Variable mean_log1m(const Variable& p) {
  return mean_all(log(add_scalar(neg(p), 1.0)));
}

void pick_fakes(const Variable& i_cs, const Variable& i_sc, AdvPairing pairing, Variable& fake_r,
                Variable& fake_a) {
  if (pairing == AdvPairing::kArtisticFake) {
    fake_a = i_cs;  // content stylized toward art -> artistic discriminator's fake
    fake_r = i_sc;
  } else {
    fake_r = i_cs;
    fake_a = i_sc;
  }
}

}  // namespace

PatchDiscriminator::PatchDiscriminator(int64_t base_width, Rng& rng) {
  if (base_width < 1) throw std::invalid_argument("discriminator: base_width must be >= 1");
  convs_.emplace_back(3, base_width, 3, 2, 1, rng);
  convs_.emplace_back(base_width, 2 * base_width, 3, 2, 1, rng);
  convs_.emplace_back(2 * base_width, 4 * base_width, 3, 2, 1, rng);
  convs_.emplace_back(4 * base_width, 1, 3, 1, 1, rng);
}

Variable PatchDiscriminator::forward(const Variable& image) const {
  if (convs_.empty()) throw std::logic_error("discriminator: uninitialized");
  Variable x = image;
  for (size_t i = 0; i + 1 < convs_.size(); ++i) x = leaky_relu(convs_[i].forward(x), 0.2);
  x = sigmoid(convs_.back().forward(x));
  return clamp(x, kProbEps, 1.0 - kProbEps);
}

void PatchDiscriminator::collect_params(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect_params(prefix + "conv" + std::to_string(i) + ".", out);
  }
}

Variable adversarial_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                          const Variable& i_c, const Variable& i_s, const Variable& i_cs,
                          const Variable& i_sc, AdvPairing pairing) {
  if (i_c.shape()[0] != i_cs.shape()[0] || i_s.shape()[0] != i_sc.shape()[0]) {
    throw std::invalid_argument("adversarial_loss: batch size mismatch");
  }
  Variable fake_r, fake_a;
  pick_fakes(i_cs, i_sc, pairing, fake_r, fake_a);
  Variable term = add(mean_log(d_r.forward(i_c)), mean_log1m(d_r.forward(fake_r)));
  term = add(term, mean_log(d_a.forward(i_s)));
  return add(term, mean_log1m(d_a.forward(fake_a)));
}

Variable discriminator_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                            const Variable& i_c, const Variable& i_s, const Variable& i_cs,
                            const Variable& i_sc, AdvPairing pairing) {
  return neg(adversarial_loss(d_r, d_a, i_c, i_s, i_cs.detach(), i_sc.detach(), pairing));
}

Variable generator_adversarial_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                                    const Variable& i_cs, const Variable& i_sc,
                                    AdvPairing pairing) {
  Variable fake_r, fake_a;
  pick_fakes(i_cs, i_sc, pairing, fake_r, fake_a);
  return neg(add(mean_log(d_r.forward(fake_r)), mean_log(d_a.forward(fake_a))));
}

Variable mixed_discriminator_loss(const PatchDiscriminator& d, const Variable& i_c,
                                  const Variable& i_s, const Variable& i_cs,
                                  const Variable& i_sc) {
  Variable real_terms = add(mean_log(d.forward(i_c)), mean_log(d.forward(i_s)));
  Variable fake_terms =
      add(mean_log1m(d.forward(i_cs.detach())), mean_log1m(d.forward(i_sc.detach())));
  return neg(add(real_terms, fake_terms));
}

Variable mixed_generator_adversarial_loss(const PatchDiscriminator& d, const Variable& i_cs,
                                          const Variable& i_sc) {
  return neg(add(mean_log(d.forward(i_cs)), mean_log(d.forward(i_sc))));
}

Variable artistic_only_discriminator_loss(const PatchDiscriminator& d_a, const Variable& i_s,
                                          const Variable& fake_a) {
  return neg(add(mean_log(d_a.forward(i_s)), mean_log1m(d_a.forward(fake_a.detach()))));
}

Variable artistic_only_generator_adversarial_loss(const PatchDiscriminator& d_a,
                                                  const Variable& fake_a) {
  return neg(mean_log(d_a.forward(fake_a)));
}

Variable l1_loss(const Variable& a, const Variable& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("l1_loss: shape mismatch");
  return mean_all(abs(sub(a, b)));
}

Variable cycle_consistency_loss(const Variable& i_c, const Variable& i_s, const Variable& rec_c,
                                const Variable& rec_s, bool asym_cycle) {
  Variable term_c = l1_loss(i_c, rec_c);
  if (asym_cycle) return term_c;
  return add(term_c, l1_loss(i_s, rec_s));
}

}  // namespace ucast
