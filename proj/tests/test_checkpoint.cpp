#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "funnel/checkpoint.hpp"
#include "helpers.hpp"

namespace funnel {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "funnel_checkpoint_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

CheckpointError::Kind load_error(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load succeeded";
  return CheckpointError::Kind::Io;
}

ModelConfig small(const char* layout) {
  ModelConfig c;
  c.layout = parse_layout(layout);
  c.vocab_size = 20;
  return c;
}

TEST(Checkpoint, ByteLayoutOfOneTensor) {
  const fs::path p = temp_path("one.ftnt");
  save_tensors({{"a", Tensor({1}, {1.0})}}, p);
  const std::string expected = std::string("FTNT") + std::string("\x01\x00\x00\x00", 4) +
                               std::string("\x01\x00\x00\x00", 4) + std::string("\x01\x00\x00\x00", 4) +
                               "a" + std::string("\x01\x01", 2) +
                               std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8) +
                               std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);
  EXPECT_EQ(read_bytes(p), expected);
}

TEST(Checkpoint, RoundTripIsBitExactAndDeterministic) {
  Rng rng(3);
  ParamMap params = init_params(small("B2-2H64D2"), rng);
  Tensor mixed = testing::random_tensor({3, 5}, rng);
  mixed[0] = -0.0;
  mixed[1] = 1e-310;  // subnormal
  params.emplace("extra.f64", mixed);
  const fs::path a = temp_path("a.ftnt");
  const fs::path b = temp_path("b.ftnt");
  save_checkpoint(params, a);
  save_checkpoint(params, b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));

  const ParamMap loaded = load_checkpoint(a);
  ASSERT_EQ(loaded.size(), params.size());
  for (const auto& [name, t] : params) {
    ASSERT_TRUE(loaded.count(name)) << name;
    EXPECT_EQ(loaded.at(name).dtype(), t.dtype()) << name;
    EXPECT_TRUE(loaded.at(name).bit_equal(t)) << name;
  }
  EXPECT_TRUE(std::signbit(loaded.at("extra.f64")[0]));
}

TEST(Checkpoint, EntryOrderDoesNotChangeTheFile) {
  const fs::path a = temp_path("order_a.ftnt");
  const fs::path b = temp_path("order_b.ftnt");
  save_tensors({{"x", Tensor({2}, {1, 2})}, {"b", Tensor({1}, {3})}}, a);
  save_tensors({{"b", Tensor({1}, {3})}, {"x", Tensor({2}, {1, 2})}}, b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
}

TEST(Checkpoint, EmptyArchive) {
  const fs::path p = temp_path("empty.ftnt");
  save_checkpoint({}, p);
  EXPECT_EQ(read_bytes(p).size(), 12u);
  EXPECT_TRUE(load_checkpoint(p).empty());
}

TEST(Checkpoint, DuplicateNamesAreRejectedBeforeWriting) {
  const fs::path p = temp_path("dup.ftnt");
  fs::remove(p);
  try {
    save_tensors({{"w", Tensor({1})}, {"w", Tensor({2})}}, p);
    FAIL() << "expected an error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::DuplicateName);
    EXPECT_EQ(e.tensor(), "w");
  }
  EXPECT_FALSE(fs::exists(p));
}

TEST(Checkpoint, ErrorTaxonomy) {
  const fs::path good = temp_path("good.ftnt");
  save_tensors({{"w", Tensor({4, 4}, std::vector<double>(16, 0.5))}}, good);
  const std::string bytes = read_bytes(good);
  const fs::path p = temp_path("bad.ftnt");

  std::string bad = bytes;
  bad[0] = 'X';
  write_bytes(p, bad);
  EXPECT_EQ(load_error(p), CheckpointError::Kind::BadMagic);

  write_bytes(p, bytes.substr(0, bytes.size() - 10));
  EXPECT_EQ(load_error(p), CheckpointError::Kind::TruncatedPayload);

  write_bytes(p, bytes.substr(0, 14));  // ends inside the first name length
  EXPECT_EQ(load_error(p), CheckpointError::Kind::CorruptHeader);

  bad = bytes;
  bad[4] = 2;
  write_bytes(p, bad);
  EXPECT_EQ(load_error(p), CheckpointError::Kind::UnsupportedVersion);

  bad = bytes;
  bad[17] = 7;  // dtype byte after the 1-character name
  write_bytes(p, bad);
  EXPECT_EQ(load_error(p), CheckpointError::Kind::CorruptHeader);

  write_bytes(p, bytes + "xx");
  EXPECT_EQ(load_error(p), CheckpointError::Kind::CorruptHeader);

  EXPECT_EQ(load_error(temp_path("does_not_exist.ftnt")), CheckpointError::Kind::Io);
}

TEST(Checkpoint, ShapeMismatchNamesTheTensor) {
  Rng rng(1);
  const fs::path p = temp_path("b22.ftnt");
  save_checkpoint(init_params(small("B2-2H64"), rng), p);
  EXPECT_NO_THROW(load_checkpoint(p, expected_param_shapes(small("B2-2H64"))));
  try {
    load_checkpoint(p, expected_param_shapes(small("B2-2-2H64")));
    FAIL() << "expected an error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::ShapeMismatch);
    EXPECT_FALSE(e.tensor().empty());
    EXPECT_NE(std::string(e.what()).find(e.tensor()), std::string::npos);
  }

  ModelConfig wide = small("B2-2H128");
  try {
    load_checkpoint(p, expected_param_shapes(wide));
    FAIL() << "expected an error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::ShapeMismatch);
    EXPECT_EQ(e.tensor(), "embedding.ln_beta");
  }
}

TEST(Checkpoint, JsonAlongside) {
  const fs::path p = temp_path("config.json");
  const nlohmann::json j = model_config_to_json(small("B2-2H64D2"));
  save_json(j, p);
  EXPECT_EQ(load_json(p), j);
  write_bytes(p, "{ not json");
  EXPECT_THROW(load_json(p), std::invalid_argument);
}

}  // namespace
}  // namespace funnel
