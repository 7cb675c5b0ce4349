#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "test_util.hpp"
#include "vitkd/attn_export.hpp"
#include "vitkd/checkpoint.hpp"
#include "vitkd/data.hpp"

using namespace vitkd;
using vitkd::test::bitwise_equal;
using vitkd::test::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vitkd_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xFF));
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// n images of rows×cols with pixel (i, y, x) = (i + y + x) % 256.
std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, std::uint32_t magic = 0x803) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, n);
  put_be32(s, rows);
  put_be32(s, cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t y = 0; y < rows; ++y) {
      for (std::uint32_t x = 0; x < cols; ++x) s.push_back(static_cast<char>((i + y + x) % 256));
    }
  }
  return s;
}

std::string idx_labels(std::uint32_t n, std::uint32_t magic = 0x801) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 10));
  return s;
}

Checkpoint sample_checkpoint() {
  Rng rng(3);
  Checkpoint c;
  c.tensors.emplace_back("a.weight", random_tensor({3, 4}, rng));
  c.tensors.emplace_back("b", random_tensor({5}, rng));
  c.tensors.emplace_back("scalar", Tensor::scalar(-7.25f));
  c.tensors.emplace_back("ünïcode.name", random_tensor({2, 1, 2}, rng));
  return c;
}

bool same_table(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].first != b.tensors[i].first) return false;
    if (!bitwise_equal(a.tensors[i].second, b.tensors[i].second)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("synthetic data is deterministic and balanced") {
  auto a = synth_generate(7, 20);
  auto b = synth_generate(7, 20);
  CHECK(bitwise_equal(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == Shape{200, 3, 32, 32});
  std::vector<int> count(10, 0);
  for (int y : a.labels) count.at(y)++;
  for (int c : count) CHECK(c == 20);
  for (float v : a.images.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_FALSE(bitwise_equal(a.images, synth_generate(8, 20).images));
  CHECK_THROWS_AS(synth_generate(1, 1, 11), ConfigError);
}

TEST_CASE("desk-size synthetic set") {
  auto d = synth_generate(1, 500, 10, 32);
  CHECK(d.size() == 5000);
  auto sep = class_separability(d, 0);
  INFO("inter ", sep.mean_inter, " intra ", sep.mean_intra);
  CHECK(sep.ratio() > 5.0);
}

TEST_CASE("train and test splits share no sample") {
  auto train = synth_generate(1, 500, 10, 32, "train");
  auto test = synth_generate(2, 100, 10, 32, "test");
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < train.size(); ++i) seen.insert(train.sample_hash(i));
  CHECK(seen.size() == train.size());
  std::size_t shared = 0;
  for (std::size_t i = 0; i < test.size(); ++i) shared += seen.count(test.sample_hash(i));
  CHECK(shared == 0);
}

TEST_CASE("IDX loading pads 28 to 32 symmetrically") {
  auto dir = scratch_dir("idx_pad");
  write_file(dir / "img", idx_images(3, 28, 28));
  write_file(dir / "lab", idx_labels(3));
  auto d = idx_load(dir / "img", dir / "lab", 32, 10);
  CHECK(d.size() == 3);
  CHECK(d.labels == std::vector<int>{0, 1, 2});
  CHECK(d.images.shape() == Shape{3, 3, 32, 32});
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(d.images.at({1, c, 0, 5}) == 0.0f);
    CHECK(d.images.at({1, c, 1, 5}) == 0.0f);
    CHECK(d.images.at({1, c, 31, 5}) == 0.0f);
    CHECK(d.images.at({1, c, 30, 5}) == 0.0f);
    CHECK(d.images.at({1, c, 5, 1}) == 0.0f);
    // Source pixel (0, 0) of image 1 is 1/255, landing at (2, 2).
    CHECK(d.images.at({1, c, 2, 2}) == 1.0f / 255.0f);
    CHECK(d.images.at({1, c, 29, 29}) == static_cast<float>((1 + 27 + 27) % 256) / 255.0f);
  }
}

TEST_CASE("IDX loading crops larger images") {
  auto dir = scratch_dir("idx_crop");
  write_file(dir / "img", idx_images(1, 10, 10));
  write_file(dir / "lab", idx_labels(1));
  auto d = idx_load(dir / "img", dir / "lab", 8, 10);
  CHECK(d.images.at({0, 0, 0, 0}) == 2.0f / 255.0f);
}

TEST_CASE("IDX errors") {
  auto dir = scratch_dir("idx_err");
  write_file(dir / "wrong_magic", idx_images(2, 4, 4, 0x801));
  write_file(dir / "img", idx_images(2, 4, 4));
  write_file(dir / "lab", idx_labels(2));
  write_file(dir / "lab3", idx_labels(3));
  try {
    idx_load(dir / "wrong_magic", dir / "lab", 4);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("0x00000801") != std::string::npos);
  }
  try {
    idx_load(dir / "img", dir / "lab3", 4);
    FAIL("expected a count error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("count") != std::string::npos);
  }
  auto full = idx_images(2, 4, 4);
  write_file(dir / "short", full.substr(0, full.size() - 3));
  CHECK_THROWS_AS(idx_load(dir / "short", dir / "lab", 4), FormatError);
  write_file(dir / "tiny", full.substr(0, 6));
  CHECK_THROWS_AS(idx_load(dir / "tiny", dir / "lab", 4), FormatError);
  CHECK_THROWS_AS(idx_load(dir / "missing", dir / "lab", 4), IoError);
  CHECK_THROWS_AS(idx_load(dir / "img", dir / "lab", 4, 1), FormatError);
}

TEST_CASE("checkpoint round trip is bitwise") {
  auto dir = scratch_dir("ckpt");
  const auto c = sample_checkpoint();
  checkpoint_save(c, dir / "a.vkd1");
  auto back = checkpoint_load(dir / "a.vkd1");
  CHECK(same_table(c, back));
  checkpoint_save(back, dir / "b.vkd1");
  CHECK(read_bytes(dir / "a.vkd1") == read_bytes(dir / "b.vkd1"));
}

TEST_CASE("checkpoint layout") {
  Checkpoint one;
  one.tensors.emplace_back("w", Tensor({2}, {1.0f, 2.0f}));
  const auto bytes = checkpoint_serialize(one);
  // magic, count, u16 len, "w", u8 rank, u32 dim, 2 floats, crc
  CHECK(bytes.size() == 4 + 4 + 2 + 1 + 1 + 4 + 8 + 4);
  CHECK(bytes.substr(0, 4) == "VKD1");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[10] == 'w');
  CHECK(bytes[11] == 1);
  CHECK(bytes[12] == 2);
}

TEST_CASE("empty checkpoint is header, count and CRC") {
  const auto bytes = checkpoint_serialize(Checkpoint{});
  CHECK(bytes.size() == 12);
  CHECK(checkpoint_deserialize(bytes).tensors.empty());
}

TEST_CASE("corrupted checkpoints are rejected") {
  const auto good = checkpoint_serialize(sample_checkpoint());
  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  try {
    checkpoint_deserialize(flipped);
    FAIL("expected a CRC error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("CRC") != std::string::npos);
  }
  auto version = good;
  version[3] = '2';
  try {
    checkpoint_deserialize(version);
    FAIL("expected a version error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(checkpoint_deserialize(magic), FormatError);
  CHECK_THROWS_AS(checkpoint_deserialize(good.substr(0, 7)), FormatError);
  CHECK_THROWS_AS(checkpoint_deserialize(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(checkpoint_load("/nonexistent/dir/x.vkd1"), IoError);
}

TEST_CASE("model checkpoints rebuild the same model") {
  auto cfg = ViTConfig::desk_student();
  cfg.seed = 21;
  cfg.input_mean = {0.1f, 0.2f, 0.3f};
  VisionTransformer model(cfg);
  auto back = model_from_checkpoint(checkpoint_deserialize(checkpoint_serialize(model_checkpoint(model))));
  CHECK(back->checksum() == model.checksum());
  CHECK(back->config().depth == cfg.depth);
  CHECK(back->config().input_mean == cfg.input_mean);
  Rng rng(4);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  CHECK(bitwise_equal(back->forward(x).logits, model.forward(x).logits));

  auto ckpt = model_checkpoint(model);
  ckpt.tensors.pop_back();
  CHECK_THROWS_AS(model_from_checkpoint(ckpt), FormatError);
}

TEST_CASE("attention export") {
  auto dir = scratch_dir("attn");
  SUBCASE("uniform map is all white") {
    auto px = attn_to_pixels(Tensor({3, 3}, 1.0f / 3));
    for (auto p : px) CHECK(p == 255);
  }
  SUBCASE("diagonal map") {
    Tensor eye({4, 4}, 0.0f);
    for (std::size_t i = 0; i < 4; ++i) eye.data()[i * 5] = 1.0f;
    auto px = attn_to_pixels(eye);
    for (std::size_t i = 0; i < 16; ++i) CHECK(px[i] == (i % 5 == 0 ? 255 : 0));
  }
  SUBCASE("zero map is black") {
    for (auto p : attn_to_pixels(Tensor::zeros({2, 2}))) CHECK(p == 0);
  }
  SUBCASE("files") {
    Rng rng(5);
    Tensor m = softmax_rows(random_tensor({5, 5}, rng, -2, 2));
    auto paths = attn_export(m, (dir / "layer0").string());
    auto csv = read_matrix_csv(paths.csv);
    REQUIRE(csv.shape() == Shape{5, 5});
    for (std::size_t i = 0; i < 25; ++i) CHECK(std::abs(csv.data()[i] - m.data()[i]) <= 1e-6);
    const auto pgm = read_bytes(paths.pgm);
    CHECK(pgm.rfind("P5\n5 5\n255\n", 0) == 0);
    CHECK(pgm.size() == std::string("P5\n5 5\n255\n").size() + 25);
    const auto text = read_bytes(paths.csv);
    CHECK(text.find("e-") == std::string::npos);
    CHECK(text.substr(0, text.find(',')).size() == 8);
  }
}
