#include <gtest/gtest.h>

#include <cstring>

#include "fmn/binary_io.hpp"
#include "fmn/tensor.hpp"
#include "support.hpp"

using fmn::Shape;
using fmn::Tensor;

TEST(Tensor, NumelIsProductOfShape) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(fmn::shape_numel({2, 3, 4}), 24u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 24u);
  EXPECT_TRUE(t.has_grad());
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), fmn::DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<double> t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), fmn::DimensionError);
}

TEST(Tensor, AllFiniteDetectsNan) {
  Tensor<float> t(Shape{3}, std::vector<float>{0.f, 1.f, 2.f});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(TensorFile, LayoutIsMagicRankDimsThenLittleEndianFloats) {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, -6.5f});
  const auto bytes = fmn::encode_tensor(t);
  ASSERT_EQ(bytes.size(), 4u + 4u + 2 * 4u + 6 * 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FMNT");
  const std::vector<std::uint8_t> rank_le{2, 0, 0, 0};
  EXPECT_TRUE(std::equal(rank_le.begin(), rank_le.end(), bytes.begin() + 4));
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 3);
  // -6.5f = 0xC0D00000
  const std::vector<std::uint8_t> last{0x00, 0x00, 0xD0, 0xC0};
  EXPECT_TRUE(std::equal(last.begin(), last.end(), bytes.end() - 4));
}

TEST(TensorFile, RoundTripIsBitExact) {
  fmn::Rng rng(5);
  const auto t = testing_support::random_tensor<float>({3, 4, 5}, rng);
  testing_support::TempDir dir("tensor");
  fmn::write_tensor(dir / "t.fmnt", t);
  const auto back = fmn::read_tensor(dir / "t.fmnt");
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(0, std::memcmp(back.storage().data(), t.storage().data(), t.numel() * sizeof(float)));
}

TEST(TensorFile, RejectsBadMagicAndTruncation) {
  Tensor<float> t(Shape{2}, std::vector<float>{1, 2});
  auto bytes = fmn::encode_tensor(t);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(fmn::decode_tensor(bad), fmn::ParseError);
  bytes.pop_back();
  EXPECT_THROW(fmn::decode_tensor(bytes), fmn::ParseError);
}

TEST(TensorFile, MissingFileIsIoError) {
  testing_support::TempDir dir("tensor_missing");
  EXPECT_THROW(fmn::read_tensor(dir / "nope.fmnt"), fmn::IoError);
}
