#include <doctest.h>

#include "properties.hpp"

using namespace mega::testing;

namespace {

void check(const PropertyResult& r) {
  INFO(r.name << ": worst " << r.worst << " vs tolerance " << r.tolerance << ", failures " << r.failures);
  CHECK(r.pass());
}

}  // namespace

TEST_CASE("index scores are affine equivariant") { check(affine_equivariance_wgt(300, 101)); }
TEST_CASE("factor scores are affine equivariant") { check(affine_equivariance_fa(300, 105)); }
TEST_CASE("likelihood is invariant to the reference indicator") { check(reference_invariance(100, 102)); }
TEST_CASE("age-acceleration residuals are orthogonal to age") { check(residual_orthogonality(300, 103)); }
TEST_CASE("HC1 matches the explicit sandwich") { check(hc1_equality(300, 104)); }
