#pragma once

// Dual-discriminator domain enhancement: patch discriminators for the
// realistic and artistic domains, the adversarial objective, and the cycle
// consistency loss.

#include "ucast/image.hpp"
#include "ucast/nn.hpp"

namespace ucast {

// Which generated image counts as which discriminator's fake. kArtisticFake
// follows the descriptive pairing (the artistic-looking output I_cs fools
// D_A); kSwapped reproduces the alternative printed assignment (I_cs as
// D_R's fake).
enum class AdvPairing { kArtisticFake, kSwapped };

// 4-layer strided convolutional patch classifier with a sigmoid head.
// Outputs per-patch probabilities clamped to [1e-7, 1-1e-7] for log safety.
class PatchDiscriminator : public Module {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(int64_t base_width, Rng& rng);

  Variable forward(const Variable& image) const;  // (B,1,h,w) probabilities
  void collect_params(const std::string& prefix, ParamMap& out) const override;

  static constexpr real kProbEps = 1e-7;

 private:
  std::vector<Conv2dLayer> convs_;
};

// The domain-enhancement objective value:
//   E[log D_R(I_c)] + E[log(1-D_R(fake_r))] + E[log D_A(I_s)] + E[log(1-D_A(fake_a))]
// The discriminators maximize this; the generator minimizes the fake terms.
Variable adversarial_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                          const Variable& i_c, const Variable& i_s, const Variable& i_cs,
                          const Variable& i_sc, AdvPairing pairing = AdvPairing::kArtisticFake);

// Discriminator training objective to MINIMIZE: the negated adversarial
// value with generated images detached (generator frozen for this step).
Variable discriminator_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                            const Variable& i_c, const Variable& i_s, const Variable& i_cs,
                            const Variable& i_sc, AdvPairing pairing = AdvPairing::kArtisticFake);

// Generator-side adversarial objective to MINIMIZE, in the non-saturating
// form -E[log D(fake)]; the reported value stays the plain objective above.
Variable generator_adversarial_loss(const PatchDiscriminator& d_r, const PatchDiscriminator& d_a,
                                    const Variable& i_cs, const Variable& i_sc,
                                    AdvPairing pairing = AdvPairing::kArtisticFake);

// Single-discriminator "mixed domains" variants: d sees both I_c and I_s as
// real and both generated images as fake.
Variable mixed_discriminator_loss(const PatchDiscriminator& d, const Variable& i_c,
                                  const Variable& i_s, const Variable& i_cs, const Variable& i_sc);
Variable mixed_generator_adversarial_loss(const PatchDiscriminator& d, const Variable& i_cs,
                                          const Variable& i_sc);

// Artistic-domain-only variant: D_A on (I_s real, artistic fake).
Variable artistic_only_discriminator_loss(const PatchDiscriminator& d_a, const Variable& i_s,
                                          const Variable& fake_a);
Variable artistic_only_generator_adversarial_loss(const PatchDiscriminator& d_a,
                                                  const Variable& fake_a);

// Mean absolute difference over all elements.
Variable l1_loss(const Variable& a, const Variable& b);

// E||I_c - G(I_cs,I_c)||_1 + E||I_s - G(I_sc,I_s)||_1 given the two
// round-trip reconstructions; the asymmetric variant keeps only the
// realistic-image term.
Variable cycle_consistency_loss(const Variable& i_c, const Variable& i_s, const Variable& rec_c,
                                const Variable& rec_s, bool asym_cycle = false);

}  // namespace ucast
