#include "test_support.hpp"

#include <cstring>

using namespace rrs;
using rrs::testing::TempDir;

TEST(TensorIo, RoundTripIsBitwise) {
  TempDir dir("tensor");
  Tensor t;
  t.dims = {3, 4};
  for (int i = 0; i < 12; ++i) t.data.push_back(std::ldexp(static_cast<float>(i) - 5.5f, i - 6));
  t.data[7] = -0.0f;
  t.data[11] = std::numeric_limits<float>::denorm_min();
  write_tensor(dir / "t.rrst", t);
  const Tensor back = read_tensor(dir / "t.rrst");
  ASSERT_EQ(back.dims, t.dims);
  ASSERT_EQ(back.data.size(), t.data.size());
  EXPECT_EQ(std::memcmp(back.data.data(), t.data.data(), 4 * t.data.size()), 0);
}

TEST(TensorIo, TruncatedPayloadNamesByteCounts) {
  Tensor t;
  t.dims = {3, 4};
  t.data.assign(12, 1.0f);
  std::string bytes = encode_tensor(t);
  bytes.resize(bytes.size() - 5);
  try {
    decode_tensor({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
    FAIL() << "truncated tensor decoded";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 48"), std::string::npos) << msg;
    EXPECT_NE(msg.find("found 43"), std::string::npos) << msg;
  }
}

TEST(TensorIo, HeaderErrorsAreFormatErrors) {
  Tensor t;
  t.dims = {2};
  t.data = {1, 2};
  const std::string good = encode_tensor(t);
  auto decode = [](std::string b) { return decode_tensor({reinterpret_cast<const unsigned char*>(b.data()), b.size()}); };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(decode(bad_version), FormatError);
  std::string bad_dtype = good;
  bad_dtype[6] = 2;
  EXPECT_THROW(decode(bad_dtype), FormatError);
  EXPECT_THROW(decode(good.substr(0, 7)), FormatError);
}

TEST(TensorIo, VectorFileSizeIsHeaderPlusPayload) {
  TempDir dir("tensor_size");
  const Vector<float> v = Vector<float>::LinSpaced(64, -1, 1);
  write_tensor(dir / "v.rrst", to_tensor(v));
  // magic 4 + version 2 + dtype 2 + rank 4 + one u64 dim
  const std::uintmax_t header = 4 + 2 + 2 + 4 + 8;
  EXPECT_EQ(std::filesystem::file_size(dir / "v.rrst"), 4 * 64 + header);
  EXPECT_EQ(std::filesystem::file_size(dir / "v.rrst"), 276u);
}

TEST(TensorIo, MatrixConversionKeepsRowMajorOrder) {
  Matrix<double> m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const Tensor t = to_tensor(m);
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(t.data, (std::vector<float>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(to_matrix<double>(t), m);
}

TEST(TensorIo, Sha256KnownDigest) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
