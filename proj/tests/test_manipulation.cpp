#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "cdnet/manipulation.hpp"
#include "support.hpp"

using namespace cdnet;
using testing_support::random_tensor;

TEST(EditMulticlass, SwapsTargetWithMaximum) {
  const std::vector<double> y{0.1, 0.2, 0.7};
  EXPECT_EQ(edit_multiclass(y, 0), (std::vector<double>{0.7, 0.2, 0.1}));
  EXPECT_EQ(edit_multiclass(y, 2), y);
}

TEST(EditMulticlass, TiesPickLowestIndex) {
  EXPECT_EQ(edit_multiclass(std::vector<double>{0.4, 0.4, 0.2}, 2), (std::vector<double>{0.2, 0.4, 0.4}));
}

TEST(EditMulticlass, OutOfRangeTargetThrows) {
  EXPECT_THROW(edit_multiclass(std::vector<double>{0.5, 0.5}, 2), EditRangeError);
}

TEST(EditMulticlass, RandomCallsPreserveMultisetAndSum) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + rng() % 9;
    std::vector<double> y(c);
    for (double& v : y) v = u(rng);
    const std::size_t target = rng() % c;
    const auto out = edit_multiclass(y, target);
    auto a = y, b = out;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
    // Floating addition is order dependent; summed in a canonical order the
    // totals agree exactly, in index order to rounding.
    ASSERT_EQ(std::accumulate(a.begin(), a.end(), 0.0), std::accumulate(b.begin(), b.end(), 0.0));
    ASSERT_NEAR(std::accumulate(y.begin(), y.end(), 0.0), std::accumulate(out.begin(), out.end(), 0.0), 1e-14);
    ASSERT_EQ(out[target], *std::max_element(y.begin(), y.end()));
    std::size_t changed = 0;
    for (std::size_t i = 0; i < c; ++i) changed += out[i] != y[i];
    ASSERT_LE(changed, 2u);
  }
}

TEST(EditMultilabel, ReplacesOnlyListedCoordinates) {
  const std::vector<double> y{0.9, 0.02, 0.4};
  const AttributeEdit e[] = {{1, 3.5}};
  EXPECT_EQ(edit_multilabel(y, e), (std::vector<double>{0.9, 3.5, 0.4}));
  EXPECT_EQ(edit_multilabel(y, {}), y);
  const AttributeEdit neg[] = {{0, -1.5}};
  EXPECT_EQ(edit_multilabel(y, neg)[0], -1.5);
}

TEST(EditMultilabel, RejectsOutOfIntervalDuplicatesAndRange) {
  const std::vector<double> y{0.1, 0.2};
  const AttributeEdit high[] = {{0, 5.5}};
  try {
    edit_multilabel(y, high);
    FAIL();
  } catch (const EditRangeError& e) {
    EXPECT_NE(std::string(e.what()).find("[-2, 5]"), std::string::npos) << e.what();
  }
  const AttributeEdit twice[] = {{0, 1.0}, {0, 2.0}};
  EXPECT_THROW(edit_multilabel(y, twice), EditRangeError);
  const AttributeEdit beyond[] = {{2, 1.0}};
  EXPECT_THROW(edit_multilabel(y, beyond), EditRangeError);
  const AttributeEdit nan[] = {{0, std::nan("")}};
  EXPECT_THROW(edit_multilabel(y, nan), EditRangeError);
  const AttributeEdit edge[] = {{0, -2.0}, {1, 5.0}};
  EXPECT_NO_THROW(edit_multilabel(y, edge));
  EXPECT_THROW(edit_multilabel(y, edge, EditInterval{-1.0, 4.0}), EditRangeError);
}

TEST(EditMultilabel, RandomCallsChangeExactlyRequestedCoordinates) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0), v(-2.0, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + rng() % 10;
    std::vector<double> y(c);
    for (double& x : y) x = u(rng);
    std::vector<std::size_t> idx(c);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(rng() % (c + 1));
    std::vector<AttributeEdit> edits;
    for (std::size_t i : idx) {
      double val = v(rng);
      while (val == y[i]) val = v(rng);
      edits.push_back({i, val});
    }
    const auto out = edit_multilabel(y, edits);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < c; ++i) {
      const bool listed = std::find(idx.begin(), idx.end(), i) != idx.end();
      if (listed) {
        ++changed;
        ASSERT_NE(out[i], y[i]);
      } else {
        ASSERT_EQ(std::bit_cast<std::uint64_t>(out[i]), std::bit_cast<std::uint64_t>(y[i]));
      }
    }
    ASSERT_EQ(changed, edits.size());
  }
}

namespace {

Model tiny_model(LabelMode mode) {
  NetworkSpec s;
  s.image_dim = 9;
  s.target_dim = 3;
  s.latent_dim = 2;
  s.mode = mode;
  s.encoder_hidden = {5};
  s.decoder_hidden = {5};
  s.discriminator_hidden = {4};
  return {s, initialize_params(s, 21)};
}

}  // namespace

TEST(Synthesize, IdentityEditReproducesReconstructionBitExactly) {
  std::mt19937_64 rng(3);
  for (LabelMode mode : {LabelMode::multiclass, LabelMode::multilabel}) {
    const Model m = tiny_model(mode);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = random_tensor(rng, 1, 9, 0.0, 1.0);
      EditRequest edit;
      edit.mode = mode;
      if (mode == LabelMode::multiclass) {
        const Tensor y = encode_y(m, x);
        edit.target_class = static_cast<std::size_t>(std::max_element(y.values().begin(), y.values().end()) - y.values().begin());
      }
      const Synthesis s = synthesize(m, x, edit);
      EXPECT_EQ(s.x_edit, reconstruct(m, x));
      EXPECT_EQ(s.y_hat_edited, s.y_hat);
    }
  }
}

TEST(Synthesize, LeavesModelAndInputUntouched) {
  const Model m = tiny_model(LabelMode::multilabel);
  const ModelParams before = m.params;
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, 1, 9, 0.0, 1.0);
  const Tensor x_copy = x;
  EditRequest edit{LabelMode::multilabel, 0, {{1, 3.0}}};
  const Synthesis s = synthesize(m, x, edit);
  EXPECT_EQ(m.params, before);
  EXPECT_EQ(x, x_copy);
  EXPECT_EQ(s.y_hat_edited(0, 1), 3.0);
  EXPECT_EQ(s.y_hat_edited(0, 0), s.y_hat(0, 0));
  EXPECT_EQ(s.z, encode_z(m, x));
  EXPECT_EQ(s.x_edit, decode(m, s.y_hat_edited, s.z));
}

TEST(Synthesize, RejectsBatchesAndModeMismatch) {
  const Model m = tiny_model(LabelMode::multilabel);
  EXPECT_THROW(synthesize(m, Tensor({2, 9}), EditRequest{}), ShapeError);
  EXPECT_THROW(synthesize(m, Tensor({1, 9}), EditRequest{LabelMode::multiclass, 0, {}}), EditRangeError);
}

TEST(EditIntervalTest, Validation) {
  EXPECT_NO_THROW(EditInterval{}.validate());
  EXPECT_THROW((EditInterval{1.0, 1.0}.validate()), ConfigError);
  EXPECT_THROW((EditInterval{0.0, std::numeric_limits<double>::infinity()}.validate()), ConfigError);
}
